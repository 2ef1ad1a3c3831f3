#pragma once

// Newline-delimited JSON protocol for black-box predictors hosted in a
// child process.
//
//   -> {"op":"info"}
//   <- {"class_count":C,"concurrency":"serial_only"|"concurrent_ok"}
//   -> {"op":"predict","images":[{"width":W,"height":H,"pixels_b64":"..."}...]}
//   <- {"probs":[[p_0..p_C-1], ...]}
//
// pixels_b64 is standard base64 (with padding) of the row-major 8-bit
// pixels. One request per line; responses come back in request order.
// A server may answer any request with {"error":"..."}.

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <csignal>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <mutex>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "tunescope/error.hpp"
#include "tunescope/image.hpp"
#include "tunescope/predictor.hpp"

namespace tunescope {

namespace base64 {

inline constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (const std::size_t rest = bytes.size() - i; rest > 0) {
    const std::uint32_t v = (bytes[i] << 16) | (rest == 2 ? bytes[i + 1] << 8 : 0);
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += rest == 2 ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

inline std::vector<std::uint8_t> decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error("base64 length is not a multiple of 4");
  std::array<int, 256> table;
  table.fill(-1);
  for (std::size_t i = 0; i < kAlphabet.size(); ++i) table[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    std::uint32_t v = 0;
    int pad = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=' && i + 4 == text.size() && j >= 2) {
        ++pad;
        v <<= 6;
        continue;
      }
      const int d = table[static_cast<unsigned char>(c)];
      if (d < 0 || pad > 0) throw Error("invalid base64 character");
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  }
  return out;
}

}  // namespace base64

inline std::string to_string(Concurrency c) { return c == Concurrency::concurrent_ok ? "concurrent_ok" : "serial_only"; }

inline Concurrency parse_concurrency(const std::string& s) {
  if (s == "concurrent_ok") return Concurrency::concurrent_ok;
  if (s == "serial_only") return Concurrency::serial_only;
  throw Error("unknown concurrency \"" + s + "\"");
}

inline nlohmann::json predict_request(std::span<const GrayImage> images) {
  nlohmann::json req{{"op", "predict"}, {"images", nlohmann::json::array()}};
  for (const auto& im : images)
    req["images"].push_back({{"width", im.width}, {"height", im.height}, {"pixels_b64", base64::encode(im.pixels)}});
  return req;
}

inline std::vector<GrayImage> parse_predict_images(const nlohmann::json& req) {
  std::vector<GrayImage> images;
  for (const auto& entry : req.at("images")) {
    const auto w = entry.at("width").get<std::size_t>();
    const auto h = entry.at("height").get<std::size_t>();
    images.emplace_back(w, h, base64::decode(entry.at("pixels_b64").get<std::string>()));
  }
  return images;
}

inline nlohmann::json probs_response(const Eigen::MatrixXd& probs) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(probs.cols()));
    for (Eigen::Index c = 0; c < probs.cols(); ++c) row[static_cast<std::size_t>(c)] = probs(r, c);
    rows.push_back(row);
  }
  return {{"probs", rows}};
}

// Answers protocol requests from `in` until end of input. Malformed
// requests get an {"error":...} line and the loop continues.
inline void serve_predictor(const Predictor& predictor, std::istream& in, std::ostream& out) {
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json reply;
    try {
      const auto req = nlohmann::json::parse(line);
      const auto op = req.at("op").get<std::string>();
      if (op == "info") {
        reply = {{"class_count", predictor.class_count()}, {"concurrency", to_string(predictor.concurrency())}};
      } else if (op == "predict") {
        const auto images = parse_predict_images(req);
        reply = probs_response(predictor.predict(images));
      } else {
        reply = {{"error", "unknown op \"" + op + "\""}};
      }
    } catch (const std::exception& e) {
      reply = {{"error", e.what()}};
    }
    out << reply.dump() << '\n' << std::flush;
  }
}

// Runs `command` through /bin/sh and speaks the protocol over its
// stdin/stdout. Requests are serialized internally.
class SubprocessPredictor final : public Predictor {
 public:
  explicit SubprocessPredictor(const std::string& command) : command_(command) {
    // Writes to a dead child must fail with EPIPE instead of killing us.
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) throw Error("cannot create pipes for predictor process");
    pid_ = fork();
    if (pid_ < 0) throw Error("cannot fork predictor process");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    to_ = fdopen(to_child[1], "w");
    from_ = fdopen(from_child[0], "r");
    if (!to_ || !from_) {
      shutdown();
      throw Error("cannot open predictor pipes");
    }
    try {
      const auto info = exchange(nlohmann::json{{"op", "info"}});
      class_count_ = info.at("class_count").get<std::size_t>();
      concurrency_ = parse_concurrency(info.at("concurrency").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      shutdown();
      throw Error("predictor \"" + command_ + "\" sent a malformed handshake: " + e.what());
    } catch (...) {
      shutdown();
      throw;
    }
    if (class_count_ < 1) {
      shutdown();
      throw Error("predictor \"" + command_ + "\" reported zero classes");
    }
  }

  SubprocessPredictor(const SubprocessPredictor&) = delete;
  SubprocessPredictor& operator=(const SubprocessPredictor&) = delete;
  ~SubprocessPredictor() override { shutdown(); }

  std::size_t class_count() const override { return class_count_; }
  Concurrency concurrency() const override { return concurrency_; }

  Eigen::MatrixXd predict(std::span<const GrayImage> images) const override {
    const auto reply = exchange(predict_request(images));
    try {
      const auto& rows = reply.at("probs");
      Eigen::MatrixXd probs(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(class_count_));
      if (rows.size() != images.size())
        throw Error("predictor returned " + std::to_string(rows.size()) + " rows for " + std::to_string(images.size()) +
                    " images");
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto row = rows[r].get<std::vector<double>>();
        if (row.size() != class_count_) throw Error("predictor row " + std::to_string(r) + " has the wrong width");
        for (std::size_t c = 0; c < row.size(); ++c)
          probs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
      }
      return probs;
    } catch (const nlohmann::json::exception& e) {
      throw Error("predictor \"" + command_ + "\" sent a malformed response: " + e.what());
    }
  }

 private:
  nlohmann::json exchange(const nlohmann::json& request) const {
    std::lock_guard lock(mutex_);
    const std::string line = request.dump() + "\n";
    if (std::fwrite(line.data(), 1, line.size(), to_) != line.size() || std::fflush(to_) != 0)
      throw Error("predictor \"" + command_ + "\" is not accepting input");
    std::string reply;
    int ch;
    while ((ch = std::fgetc(from_)) != EOF && ch != '\n') reply.push_back(static_cast<char>(ch));
    if (ch == EOF && reply.empty()) throw Error("predictor \"" + command_ + "\" closed its output");
    nlohmann::json parsed;
    try {
      parsed = nlohmann::json::parse(reply);
    } catch (const nlohmann::json::exception&) {
      throw Error("predictor \"" + command_ + "\" sent non-JSON output: " + reply.substr(0, 200));
    }
    if (parsed.contains("error")) throw Error("predictor \"" + command_ + "\" reported: " + parsed["error"].dump());
    return parsed;
  }

  void shutdown() {
    if (to_) {
      std::fclose(to_);
      to_ = nullptr;
    }
    if (from_) {
      std::fclose(from_);
      from_ = nullptr;
    }
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  std::string command_;
  pid_t pid_ = -1;
  std::FILE* to_ = nullptr;
  std::FILE* from_ = nullptr;
  std::size_t class_count_ = 0;
  Concurrency concurrency_ = Concurrency::serial_only;
  mutable std::mutex mutex_;
};

}  // namespace tunescope
