#pragma once

// 8-bit grayscale images and binary PGM (P5) I/O.

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "tunescope/error.hpp"

namespace tunescope {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}
  GrayImage(std::size_t w, std::size_t h, std::vector<std::uint8_t> px) : width(w), height(h), pixels(std::move(px)) {
    if (pixels.size() != w * h)
      throw Error("image pixel count " + std::to_string(pixels.size()) + " does not match " + std::to_string(w) + "x" +
                  std::to_string(h));
  }

  std::size_t size() const { return pixels.size(); }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }

  bool operator==(const GrayImage&) const = default;
};

inline std::uint8_t clamp_u8(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(v + 0.5);
}

inline std::string encode_pgm(const GrayImage& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

// Accepts P5 with maxval <= 255 and '#' comments anywhere in the header.
inline GrayImage decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space_and_comments = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* what) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      ++pos;
      ++digits;
    }
    if (digits == 0) throw Error(std::string("malformed PGM header: missing ") + what);
    return v;
  };

  if (bytes.size() < 2 || bytes[0] != 'P') throw Error("not a PGM file");
  if (bytes[1] == '2') throw Error("ASCII PGM (P2) unsupported");
  if (bytes[1] != '5') throw Error("not a binary PGM (P5) file");
  pos = 2;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (maxval > 255) throw Error("16-bit PGM unsupported");
  if (maxval == 0) throw Error("malformed PGM header: maxval 0");
  if (width == 0 || height == 0) throw Error("malformed PGM header: zero dimension");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw Error("malformed PGM header: no separator after maxval");
  ++pos;

  const std::size_t expected = width * height;
  const std::size_t available = bytes.size() - pos;
  if (available < expected)
    throw Error("truncated PGM payload: expected " + std::to_string(expected) + " bytes, got " +
                std::to_string(available));
  GrayImage img(width, height);
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
            bytes.begin() + static_cast<std::ptrdiff_t>(pos + expected), img.pixels.begin());
  return img;
}

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open \"" + path + "\"");
  return std::string{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write \"" + path + "\"");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for \"" + path + "\"");
}

inline GrayImage read_pgm(const std::string& path) {
  try {
    return decode_pgm(read_file_bytes(path));
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

inline void write_pgm(const std::string& path, const GrayImage& image) { write_file_bytes(path, encode_pgm(image)); }

}  // namespace tunescope
