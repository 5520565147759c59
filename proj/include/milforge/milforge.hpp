#pragma once

#include "milforge/aggregators.hpp"
#include "milforge/data.hpp"
#include "milforge/error.hpp"
#include "milforge/eval.hpp"
#include "milforge/matrix.hpp"
#include "milforge/rng.hpp"
#include "milforge/tape.hpp"
#include "milforge/training.hpp"

namespace milforge {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace milforge
