// Copyright (c) 2026, the grasskit authors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace grasskit {

using Digest256 = std::array<std::uint8_t, 32>;

// Plain FIPS 180-4 SHA-256. Used to fingerprint compressor specs and run
// configs; not a performance path.
Digest256 sha256(const void* data, std::size_t len);
Digest256 sha256(const std::string& text);
std::string to_hex(const Digest256& d);

}  // namespace grasskit
