#pragma once

namespace aclstage::nn {

// Keeps freed tensor buffers in the process heap instead of returning them
// to the OS; training allocates and frees the same large blocks every step
// and would otherwise pay for fresh page faults each time. No-op outside
// glibc.
void retain_freed_memory();

}  // namespace aclstage::nn
