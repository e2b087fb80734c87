#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tprop/errors.hpp"
#include "tprop/layers.hpp"
#include "tprop/linalg.hpp"
#include "tprop/models.hpp"

namespace tprop {

using Model = std::variant<NetworkParams, AutoEncoderParams>;

// Checkpoint layout (all integers little-endian):
//
//   "TPROP1"                      6-byte magic
//   u32 kind                      1 = network, 2 = auto-encoder
//   u32 L                         layer records
//   L x { u8 role, u8 activation, u8 mode, u8 0 }
//                                 role 0 = forward (mode = transmit),
//                                 role 1 = inverse (mode = binarize_input)
//   u32 T                         tensors
//   T x { u32 rows, u32 cols }    shape table
//   raw IEEE-754 float64 data for every tensor in table order, row-major
//
// Network tensors: W_i, b_i for each forward layer, then V_i, c_i for each
// inverse layer. Auto-encoder tensors: W, b, c. Biases are stored as (n x 1).
inline constexpr std::string_view kCheckpointMagic = "TPROP1";

namespace detail {

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
  }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::string_view bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }
  std::uint32_t u32() {
    auto s = bytes(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(s[i])} << (8 * i);
    return v;
  }
  double f64() {
    auto s = bytes(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<std::uint8_t>(s[i])} << (8 * i);
    return std::bit_cast<double>(v);
  }
  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint: truncated data");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

struct LayerRecord {
  std::uint8_t role, activation, mode;
};

inline Activation activation_from_code(std::uint8_t c) {
  if (c > static_cast<std::uint8_t>(Activation::softmax)) throw FormatError("checkpoint: bad activation code");
  return static_cast<Activation>(c);
}

inline Transmit transmit_from_code(std::uint8_t c) {
  if (c > static_cast<std::uint8_t>(Transmit::stochastic_binary)) throw FormatError("checkpoint: bad transmit code");
  return static_cast<Transmit>(c);
}

}  // namespace detail

inline std::string encode_checkpoint(const Model& model) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  std::vector<detail::LayerRecord> records;
  std::vector<Matrix> tensors;
  std::uint32_t kind = 0;
  if (const auto* net = std::get_if<NetworkParams>(&model)) {
    kind = 1;
    for (const auto& l : net->forward) {
      records.push_back({0, static_cast<std::uint8_t>(l.act), static_cast<std::uint8_t>(l.transmit)});
      tensors.push_back(l.W);
      tensors.push_back(l.b.as_column());
    }
    for (const auto& g : net->inverse) {
      records.push_back({1, static_cast<std::uint8_t>(g.act), static_cast<std::uint8_t>(g.binarize_input ? 1 : 0)});
      tensors.push_back(g.V);
      tensors.push_back(g.c.as_column());
    }
  } else {
    const auto& ae = std::get<AutoEncoderParams>(model);
    kind = 2;
    tensors = {ae.W, ae.b.as_column(), ae.c.as_column()};
  }
  w.u32(kind);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    w.u8(r.role);
    w.u8(r.activation);
    w.u8(r.mode);
    w.u8(0);
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.rows()));
    w.u32(static_cast<std::uint32_t>(t.cols()));
  }
  for (const auto& t : tensors)
    for (double v : t.data()) w.f64(v);
  return w.take();
}

inline Model decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("checkpoint: bad magic (expected \"TPROP1\")");
  }
  const std::uint32_t kind = r.u32();
  const std::uint32_t n_records = r.u32();
  std::vector<detail::LayerRecord> records(n_records);
  for (auto& rec : records) {
    rec.role = r.u8();
    rec.activation = r.u8();
    rec.mode = r.u8();
    r.u8();
  }
  const std::uint32_t n_tensors = r.u32();
  std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(n_tensors);
  for (auto& s : shapes) {
    s.first = r.u32();
    s.second = r.u32();
  }
  std::vector<Matrix> tensors;
  for (const auto& [rows, cols] : shapes) {
    const std::uint64_t count = std::uint64_t{rows} * cols;
    if (count > r.remaining() / 8) throw FormatError("checkpoint: truncated data");
    std::vector<double> data(count);
    for (double& v : data) v = r.f64();
    tensors.emplace_back(rows, cols, std::move(data));
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes");

  auto as_vector = [](const Matrix& m) {
    if (m.cols() != 1) throw FormatError("checkpoint: bias tensor must have one column");
    return Vector::from_column(m);
  };
  if (kind == 1) {
    if (tensors.size() != 2 * records.size()) throw FormatError("checkpoint: tensor count does not match layers");
    NetworkParams net;
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& rec = records[i];
      if (rec.role == 0) {
        net.forward.push_back({tensors[2 * i], as_vector(tensors[2 * i + 1]), detail::activation_from_code(rec.activation),
                               detail::transmit_from_code(rec.mode)});
      } else if (rec.role == 1) {
        net.inverse.push_back({tensors[2 * i], as_vector(tensors[2 * i + 1]), detail::activation_from_code(rec.activation),
                               rec.mode != 0});
      } else {
        throw FormatError("checkpoint: bad layer role");
      }
    }
    try {
      net.validate();
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint: inconsistent network: ") + e.what());
    }
    return net;
  }
  if (kind == 2) {
    if (tensors.size() != 3 || !records.empty()) throw FormatError("checkpoint: auto-encoder needs exactly W, b, c");
    AutoEncoderParams ae{tensors[0], as_vector(tensors[1]), as_vector(tensors[2])};
    try {
      ae.validate();
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint: inconsistent auto-encoder: ") + e.what());
    }
    return ae;
  }
  throw FormatError("checkpoint: unknown model kind " + std::to_string(kind));
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace tprop
