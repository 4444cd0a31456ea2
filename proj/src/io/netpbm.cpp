#include "dcv/netpbm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "dcv/checkpoint.hpp"
#include "dcv/error.hpp"

namespace dcv {

namespace fs = std::filesystem;

namespace {

struct Header {
    std::string magic;
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t maxval = 1;
    std::size_t data_offset = 0;
};

Header parse_header(const std::string& bytes, bool has_maxval, const fs::path& path) {
    Header h;
    std::size_t pos = 0;
    auto next_token = [&]() {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw FormatError(path.string() + ": truncated header");
        return bytes.substr(start, pos - start);
    };
    auto number = [&]() {
        const auto tok = next_token();
        if (tok.find_first_not_of("0123456789") != std::string::npos) {
            throw FormatError(path.string() + ": bad header field '" + tok + "'");
        }
        return static_cast<std::size_t>(std::stoull(tok));
    };
    h.magic = next_token();
    h.width = number();
    h.height = number();
    if (has_maxval) h.maxval = number();
    if (pos >= bytes.size()) throw FormatError(path.string() + ": missing pixel data");
    h.data_offset = pos + 1;  // single whitespace byte after the header
    if (h.width == 0 || h.height == 0) throw FormatError(path.string() + ": zero image extent");
    return h;
}

void write_bytes(const fs::path& path, const std::string& header, const std::string& body) {
    write_text_file(path, header + body);
}

} // namespace

void write_ppm(const fs::path& path, const Image& image) {
    if (image.channels != 3) throw ArgumentError("PPM needs 3 channels");
    std::string body(image.pixels.size(), '\0');
    for (std::size_t i = 0; i < image.pixels.size(); ++i) {
        const double v = std::clamp(image.pixels[i], 0.0, 1.0);
        body[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n", body);
}

Image read_ppm(const fs::path& path) {
    const auto bytes = read_text_file(path);
    const auto h = parse_header(bytes, true, path);
    if (h.magic != "P6") throw FormatError(path.string() + ": expected P6, found " + h.magic);
    if (h.maxval != 255) throw FormatError(path.string() + ": only maxval 255 is supported");
    const std::size_t n = h.width * h.height * 3;
    if (bytes.size() < h.data_offset + n) throw FormatError(path.string() + ": pixel data truncated");
    Image img(h.height, h.width, 3);
    for (std::size_t i = 0; i < n; ++i) {
        img.pixels[i] = static_cast<unsigned char>(bytes[h.data_offset + i]) / 255.0;
    }
    return img;
}

void write_pbm(const fs::path& path, const Mask& mask) {
    const std::size_t row_bytes = (mask.width + 7) / 8;
    std::string body(row_bytes * mask.height, '\0');
    for (std::size_t y = 0; y < mask.height; ++y) {
        for (std::size_t x = 0; x < mask.width; ++x) {
            if (mask.at(y, x)) body[y * row_bytes + x / 8] |= static_cast<char>(0x80 >> (x % 8));
        }
    }
    write_bytes(path, "P4\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n", body);
}

Mask read_pbm(const fs::path& path) {
    const auto bytes = read_text_file(path);
    const auto h = parse_header(bytes, false, path);
    if (h.magic != "P4") throw FormatError(path.string() + ": expected P4, found " + h.magic);
    const std::size_t row_bytes = (h.width + 7) / 8;
    if (bytes.size() < h.data_offset + row_bytes * h.height) {
        throw FormatError(path.string() + ": bitmap truncated");
    }
    Mask m(h.height, h.width);
    for (std::size_t y = 0; y < h.height; ++y) {
        for (std::size_t x = 0; x < h.width; ++x) {
            const auto byte = static_cast<unsigned char>(bytes[h.data_offset + y * row_bytes + x / 8]);
            if (byte & (0x80 >> (x % 8))) m.set(y, x);
        }
    }
    return m;
}

void write_pgm(const fs::path& path, std::size_t height, std::size_t width, std::span<const double> values) {
    if (values.size() != height * width) throw ArgumentError("PGM value count does not match extent");
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double range = *hi - *lo;
    std::string body(values.size(), '\0');
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = range > 0.0 ? (values[i] - *lo) / range : 0.0;
        body[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    write_bytes(path, "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n", body);
}

Mask expand_mask(const Mask& mask, std::size_t factor) {
    if (factor == 0) throw ArgumentError("expansion factor must be >= 1");
    Mask out(mask.height * factor, mask.width * factor);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            if (mask.at(y / factor, x / factor)) out.set(y, x);
        }
    }
    return out;
}

} // namespace dcv
