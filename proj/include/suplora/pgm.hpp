#pragma once

// Binary PGM (P5) writer for sampled images. Values are clamped to [0,1]
// and quantized to 8 bits; output bytes are a pure function of the input.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "suplora/matrix.hpp"

namespace suplora {

inline std::string pgm_bytes(const Matrix& image) {
    if (image.rows == 0 || image.cols == 0)
        throw std::invalid_argument("pgm_bytes: empty image");
    std::string out = "P5\n" + std::to_string(image.cols) + " " +
                      std::to_string(image.rows) + "\n255\n";
    out.reserve(out.size() + image.data.size());
    for (double v : image.data) {
        const double clamped = std::min(1.0, std::max(0.0, v));
        out.push_back(static_cast<char>(
            static_cast<unsigned char>(std::lround(clamped * 255.0))));
    }
    return out;
}

inline void write_pgm(const std::filesystem::path& path, const Matrix& image) {
    const std::string bytes = pgm_bytes(image);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path.string());
}

}  // namespace suplora
