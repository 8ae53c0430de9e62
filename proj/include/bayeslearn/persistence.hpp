#pragma once

// Packed numeric arrays for the saved-model document: base64 of
// little-endian float64 values in column-major order, with explicit
// dimensions, so a save/load round trip is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <Eigen/Dense>
#include <json.hpp>

#include "errors.hpp"

namespace bayeslearn::persistence {

inline constexpr const char* kFormatName = "bayeslearn-model";
inline constexpr int kFormatVersion = 1;
inline constexpr const char* kArrayEncoding = "base64/float64-le/column-major";

inline std::string base64_encode(std::string_view bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::string_view::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

/// Throws DataError on malformed input.
inline std::string base64_decode(std::string_view text) {
  using namespace boost::archive::iterators;
  if (text.size() % 4 != 0) throw DataError("base64 length is not a multiple of 4");
  std::size_t pad = 0;
  while (pad < 2 && pad < text.size() && text[text.size() - 1 - pad] == '=') ++pad;
  for (std::size_t i = 0; i < text.size() - pad; ++i) {
    const char c = text[i];
    const bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
                    c == '+' || c == '/';
    if (!ok) throw DataError("invalid base64 character at offset " + std::to_string(i));
  }
  std::string padded(text);
  std::fill(padded.end() - static_cast<std::ptrdiff_t>(pad), padded.end(), 'A');
  using It = transform_width<binary_from_base64<std::string::const_iterator>, 8, 6>;
  std::string out(It(padded.cbegin()), It(padded.cend()));
  out.erase(out.end() - static_cast<std::ptrdiff_t>(pad), out.end());
  return out;
}

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace detail

inline nlohmann::json pack(const Eigen::MatrixXd& m) {
  std::string bytes(static_cast<std::size_t>(m.size()) * 8, '\0');
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(m.data()[i]));
    std::memcpy(bytes.data() + 8 * i, &bits, 8);
  }
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"encoding", kArrayEncoding},
          {"data", base64_encode(bytes)}};
}

inline nlohmann::json pack(const std::vector<double>& v) {
  return pack(Eigen::MatrixXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()))));
}

/// Inverse of pack; `field` names the array in error messages.
inline Eigen::MatrixXd unpack(const nlohmann::json& j, const std::string& field) {
  try {
    if (j.at("encoding").get<std::string>() != kArrayEncoding)
      throw LoadError(field, "unsupported array encoding");
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) throw LoadError(field, "negative dimensions");
    const std::string bytes = base64_decode(j.at("data").get<std::string>());
    if (bytes.size() != static_cast<std::size_t>(rows * cols) * 8)
      throw LoadError(field, "array payload does not match " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + 8 * i, 8);
      m.data()[i] = std::bit_cast<double>(detail::to_little_endian(bits));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(field, std::string("malformed array: ") + e.what());
  } catch (const DataError& e) {
    throw LoadError(field, e.what());
  }
}

inline std::vector<double> unpack_vector(const nlohmann::json& j, const std::string& field) {
  const Eigen::MatrixXd m = unpack(j, field);
  return {m.data(), m.data() + m.size()};
}

/// j[key] or LoadError naming the key.
inline const nlohmann::json& require(const nlohmann::json& j, const std::string& key) {
  if (!j.is_object() || !j.contains(key)) throw LoadError(key, "missing field");
  return j.at(key);
}

template <class T>
T require_as(const nlohmann::json& j, const std::string& key) {
  try {
    return require(j, key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(key, std::string("wrong type: ") + e.what());
  }
}

}  // namespace bayeslearn::persistence
