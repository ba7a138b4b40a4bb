#pragma once

#include <string>

#include "ccm/networks.hpp"

namespace ccm {

// Model file: magic "CCMM", version, spec header, then the named tensors of
// ModelState::for_each_tensor in order, each as name + TNSR blob.
void save_model(ModelState& model, const std::string& path);
ModelState load_model(const std::string& path);

}  // namespace ccm
