#pragma once

#include <cstddef>
#include <string>

namespace bm {

/// URL-safe random token drawn from the OS CSPRNG. 16 bytes gives 128 bits.
std::string random_token(std::size_t bytes = 16);

}  // namespace bm
