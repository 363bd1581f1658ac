#include "step/hashing.hpp"

#include <array>
#include <fstream>

#include <openssl/evp.h>

#include "step/errors.hpp"

namespace step {

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr);
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

Sha256& Sha256::update(std::span<const std::byte> bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
  return *this;
}

Sha256& Sha256::update(std::string_view text) {
  return update(std::as_bytes(std::span(text.data(), text.size())));
}

Sha256& Sha256::update(const torch::Tensor& t) {
  auto c = t.detach().cpu().contiguous();
  update(std::string(c10::toString(c.scalar_type())));
  for (auto s : c.sizes()) update(std::to_string(s) + ",");
  return update(std::span(static_cast<const std::byte*>(c.data_ptr()), c.nbytes()));
}

std::string Sha256::hex_digest() {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md.data(), &len);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(std::string_view text) { return Sha256().update(text).hex_digest(); }

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  Sha256 h;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(std::as_bytes(std::span(buf.data(), static_cast<std::size_t>(in.gcount()))));
  }
  return h.hex_digest();
}

std::string parameter_hash(const torch::nn::Module& module) {
  Sha256 h;
  for (const auto& p : module.named_parameters()) h.update(p.key()).update(p.value());
  for (const auto& b : module.named_buffers()) h.update(b.key()).update(b.value());
  return h.hex_digest();
}

}  // namespace step
