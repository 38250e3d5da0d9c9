#include "bm/tokens.hpp"

#include "bm/codec.hpp"

#include <openssl/rand.h>

#include <algorithm>
#include <stdexcept>

namespace bm {

std::string random_token(std::size_t bytes) {
  Bytes raw(bytes);
  if (RAND_bytes(raw.data(), int(raw.size())) != 1) {
    throw std::runtime_error("random_token: CSPRNG unavailable");
  }
  std::string token = base64_encode(raw);
  std::replace(token.begin(), token.end(), '+', '-');
  std::replace(token.begin(), token.end(), '/', '_');
  token.erase(std::remove(token.begin(), token.end(), '='), token.end());
  return token;
}

}  // namespace bm
