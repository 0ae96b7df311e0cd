// Trains a small codec on one noisy image for a few hundred steps, then
// denoises the same image and compares against the wavelet baseline.
//
//   denoise_quickstart <clean.pgm|png> [steps]

#include <cstdlib>
#include <iostream>

#include "decompress/decompress.hpp"

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: denoise_quickstart <clean image> [steps]\n";
    return 2;
  }
  namespace dc = decompress;
  try {
    const dc::Image clean = dc::read_image(argv[1]);
    const dc::Image noisy = dc::add_awgn(clean, {25.0, 1});

    dc::TrainConfig cfg;
    cfg.lambda = 1000;
    cfg.steps = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 300;
    cfg.batch_size = 16;
    cfg.arch.hidden_channels = 64;  // narrower than the default for a quick run
    cfg.log_interval = 50;
    auto trained = dc::train<float>({noisy}, cfg, [](const dc::LogRecord& r) {
      std::cout << "step " << r.step << "  D " << r.loss.distortion << "  R " << r.loss.rate << "\n";
    });

    dc::DenoiseOptions opts;
    opts.stride = 2;
    const dc::Image denoised = dc::denoise(noisy, trained.codec, opts);
    std::cout << "noisy    " << dc::psnr(clean, noisy) << " dB\n"
              << "codec    " << dc::psnr(clean, denoised) << " dB\n"
              << "wavelet  " << dc::psnr(clean, dc::bayes_shrink_denoise(noisy, 25.0)) << " dB\n";
    dc::write_image("denoised.png", denoised);
  } catch (const dc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
