#pragma once

// The float and double builds live in distinct inline namespaces so that both
// libraries can be linked into one program (e.g. a double-precision oracle
// checking the float build).
#ifdef ITSR_DOUBLE
#define ITSR_ABI f64
#else
#define ITSR_ABI f32
#endif
