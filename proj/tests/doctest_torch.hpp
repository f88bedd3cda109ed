#pragma once

// c10's logging header defines CHECK and CHECK_EQ..CHECK_GT as fatal asserts.
// Pull it in first and drop those so doctest's macros are the ones in effect.

#include <torch/torch.h>

#undef CHECK
#undef CHECK_EQ
#undef CHECK_NE
#undef CHECK_LT
#undef CHECK_LE
#undef CHECK_GT
#undef CHECK_GE

#include "doctest.h"
