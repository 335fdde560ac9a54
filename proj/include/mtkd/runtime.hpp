// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace mtkd {

/// Keeps large freed blocks in the heap instead of returning them to the OS.
/// Call once at program start; a no-op outside glibc.
void tune_allocator();

}  // namespace mtkd
