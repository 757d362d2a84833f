#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmsteer/tensor.hpp"

namespace mms {

// named arrays plus a JSON header; values stored as raw IEEE doubles so a
// save/load round trip is bit-exact
struct Checkpoint {
    std::string kind;
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor& get(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& expect_kind);
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path, const std::string& expect_kind);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace mms
