// Hosts a reference-network checkpoint behind the line-delimited JSON
// predictor protocol on stdin/stdout, for use with `tunescope explain
// --predictor-cmd`.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "tunescope/predictors.hpp"
#include "tunescope/protocol.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Serve a reference-network checkpoint over the tunescope predictor protocol"};
  std::string checkpoint;
  std::string concurrency = "serial_only";
  app.add_option("--checkpoint", checkpoint, "NTF checkpoint of a reference network")->required();
  app.add_option("--concurrency", concurrency, "Concurrency advertised in the handshake")
      ->check(CLI::IsMember({"serial_only", "concurrent_ok"}))
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    std::ifstream in(checkpoint, std::ios::binary);
    if (!in) throw tunescope::Error("cannot open \"" + checkpoint + "\"");
    const tunescope::NetPredictor net(tunescope::import_checkpoint(tunescope::read_checkpoint(in)));

    // Advertise the requested concurrency while delegating predictions.
    class Advertised final : public tunescope::Predictor {
     public:
      Advertised(const tunescope::Predictor& inner, tunescope::Concurrency c) : inner_(inner), c_(c) {}
      std::size_t class_count() const override { return inner_.class_count(); }
      tunescope::Concurrency concurrency() const override { return c_; }
      Eigen::MatrixXd predict(std::span<const tunescope::GrayImage> images) const override {
        return inner_.predict(images);
      }

     private:
      const tunescope::Predictor& inner_;
      tunescope::Concurrency c_;
    } advertised(net, tunescope::parse_concurrency(concurrency));

    tunescope::serve_predictor(advertised, std::cin, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "tunescope-predictor: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
