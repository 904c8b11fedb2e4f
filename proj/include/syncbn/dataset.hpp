#pragma once

// Synthetic image-like classification data: every class is a centred
// Gaussian blob with its own width on a (C, H, W) grid, plus i.i.d. pixel
// noise. Templates depend only on the spec; samples depend on the seed.

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "errors.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace syncbn {

struct DatasetSpec {
  std::int64_t classes = 4;
  std::int64_t size = 512;
  std::int64_t eval_size = 256;
  std::int64_t channels = 1;
  std::int64_t height = 8;
  std::int64_t width = 8;
  double noise = 1.0;       // pixel noise std
  double separation = 4.0;  // closest pair of class templates is this many noise stds apart

  void validate() const {
    if (classes < 2) throw InvalidArgument("dataset needs at least 2 classes");
    if (size < 1 || eval_size < 1) throw InvalidArgument("dataset sizes must be positive");
    if (channels < 1 || height < 1 || width < 1) throw InvalidArgument("dataset image extents must be positive");
    if (!(noise > 0) || !std::isfinite(noise)) throw InvalidArgument("dataset noise must be positive");
    if (!(separation > 0) || !std::isfinite(separation)) throw InvalidArgument("dataset separation must be positive");
    if (static_cast<std::uint64_t>(classes) > std::numeric_limits<std::uint32_t>::max()) {
      throw InvalidArgument("too many classes");
    }
  }

  Shape image_shape() const { return {channels, height, width}; }
};

struct Dataset {
  Tensor images;  // (size, C, H, W)
  std::vector<std::int64_t> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t classes = 0;
};

// One template per class, shape (classes, C, H, W).
inline Tensor class_templates(const DatasetSpec& spec) {
  spec.validate();
  const auto K = spec.classes, C = spec.channels, H = spec.height, W = spec.width;
  Tensor t = new_tensor({K, C, H, W}, 0.0);
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  const double extent = 0.5 * static_cast<double>(std::max(H, W));
  const auto plane = static_cast<std::size_t>(C * H * W);
  auto data = t.data();
  for (std::int64_t k = 0; k < K; ++k) {
    const double sigma = extent * (0.2 + 0.8 * static_cast<double>(k) / static_cast<double>(K - 1));
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const double dy = static_cast<double>(h) - cy, dx = static_cast<double>(w) - cx;
          data[static_cast<std::size_t>(k) * plane + static_cast<std::size_t>((c * H + h) * W + w)] =
              std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
        }
  }
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::int64_t a = 0; a < K; ++a)
    for (std::int64_t b = a + 1; b < K; ++b) {
      double d2 = 0;
      for (std::size_t j = 0; j < plane; ++j) {
        const double d = data[static_cast<std::size_t>(a) * plane + j] - data[static_cast<std::size_t>(b) * plane + j];
        d2 += d * d;
      }
      min_dist = std::min(min_dist, std::sqrt(d2));
    }
  if (!(min_dist > 0)) throw InvalidArgument("dataset grid too small to separate classes");
  const double scale = spec.separation * spec.noise / min_dist;
  for (auto& v : data) v *= scale;
  return t;
}

namespace detail {

inline Dataset sample_dataset(const DatasetSpec& spec, const Tensor& templates, std::int64_t n, std::uint64_t seed) {
  Rng rng(seed);
  const auto plane = static_cast<std::size_t>(spec.channels * spec.height * spec.width);
  Dataset ds;
  ds.classes = spec.classes;
  ds.images = new_tensor({n, spec.channels, spec.height, spec.width}, 0.0);
  ds.labels.resize(static_cast<std::size_t>(n));
  auto out = ds.images.data();
  auto tpl = templates.data();
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    const auto k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(spec.classes)));
    ds.labels[i] = k;
    for (std::size_t j = 0; j < plane; ++j) {
      out[i * plane + j] = tpl[static_cast<std::size_t>(k) * plane + j] + spec.noise * rng.normal();
    }
  }
  return ds;
}

}  // namespace detail

struct DatasetPair {
  Dataset train;
  Dataset eval;
};

inline DatasetPair generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  const auto templates = class_templates(spec);
  return {detail::sample_dataset(spec, templates, spec.size, mix_seed(seed, 0x7472616eULL)),
          detail::sample_dataset(spec, templates, spec.eval_size, mix_seed(seed, 0x6576616cULL))};
}

// ---------------------------------------------------------------------------
// Binary format (little-endian):
//   "SBND" u32 version | u64 n | u32 classes | u32 C | u32 H | u32 W
//   n x u32 label | n*C*H*W x f64 pixel

inline constexpr std::uint32_t kDatasetVersion = 1;

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class U>
U get_le(const std::string& in, std::size_t& at) {
  if (at + sizeof(U) > in.size()) throw InvalidArgument("dataset file truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  at += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string serialize_dataset(const Dataset& ds) {
  const auto& s = ds.images.shape();
  std::string out = "SBND";
  detail::put_le<std::uint32_t>(out, kDatasetVersion);
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(ds.size()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.classes));
  for (std::size_t i = 1; i < 4; ++i) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s[i]));
  for (auto l : ds.labels) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(l));
  for (double v : ds.images.data()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Dataset deserialize_dataset(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "SBND") != 0) throw InvalidArgument("not a dataset file");
  std::size_t at = 4;
  if (detail::get_le<std::uint32_t>(bytes, at) != kDatasetVersion) throw InvalidArgument("unsupported dataset version");
  const auto n = static_cast<std::int64_t>(detail::get_le<std::uint64_t>(bytes, at));
  Dataset ds;
  ds.classes = detail::get_le<std::uint32_t>(bytes, at);
  Shape shape{n, 0, 0, 0};
  for (std::size_t i = 1; i < 4; ++i) shape[i] = detail::get_le<std::uint32_t>(bytes, at);
  ds.images = new_tensor(shape, 0.0);
  ds.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : ds.labels) {
    l = detail::get_le<std::uint32_t>(bytes, at);
    if (l >= ds.classes) throw InvalidArgument("dataset label out of range");
  }
  for (auto& v : ds.images.data()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, at));
  if (at != bytes.size()) throw InvalidArgument("dataset file has trailing bytes");
  require_finite<double>(ds.images.data(), "deserialize_dataset");
  return ds;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open for reading: " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// SHA-1 of "blob <len>\0" + bytes, i.e. the object id git assigns the file.
inline std::string git_blob_hash(const std::string& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw Error("EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, md.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error("sha1 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

// Rows [begin, begin + count) of the dataset in the order given by `order`.
inline std::pair<Tensor, std::vector<std::int64_t>> gather_batch(const Dataset& ds,
                                                                 std::span<const std::int64_t> order,
                                                                 std::int64_t begin, std::int64_t count) {
  if (begin < 0 || count < 1 || begin + count > static_cast<std::int64_t>(order.size())) {
    throw InvalidArgument("gather_batch: range out of bounds");
  }
  Shape shape = ds.images.shape();
  shape[0] = count;
  Tensor x = new_tensor(shape, 0.0);
  const auto plane = ds.images.size() / static_cast<std::size_t>(ds.size());
  std::vector<std::int64_t> y(static_cast<std::size_t>(count));
  auto src = ds.images.data();
  auto dst = x.data();
  for (std::int64_t i = 0; i < count; ++i) {
    const auto row = static_cast<std::size_t>(order[static_cast<std::size_t>(begin + i)]);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(row * plane), plane,
                dst.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * plane));
    y[static_cast<std::size_t>(i)] = ds.labels[row];
  }
  return {std::move(x), std::move(y)};
}

// Nearest-class-mean classifier (a linear rule for equal isotropic noise):
// fit on `fit`, returns accuracy on `test`.
inline double nearest_mean_probe(const Dataset& fit, const Dataset& test) {
  const auto K = static_cast<std::size_t>(fit.classes);
  const auto plane = fit.images.size() / static_cast<std::size_t>(fit.size());
  std::vector<double> means(K * plane, 0.0);
  std::vector<double> counts(K, 0.0);
  for (std::size_t i = 0; i < fit.labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(fit.labels[i]);
    counts[k] += 1;
    for (std::size_t j = 0; j < plane; ++j) means[k * plane + j] += fit.images.data()[i * plane + j];
  }
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < plane; ++j) means[k * plane + j] /= std::max(counts[k], 1.0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double d = 0;
      for (std::size_t j = 0; j < plane; ++j) {
        const double e = test.images.data()[i * plane + j] - means[k * plane + j];
        d += e * e;
      }
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    correct += static_cast<std::int64_t>(best) == test.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(test.labels.size());
}

}  // namespace syncbn
