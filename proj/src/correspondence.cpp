#include "safe/correspondence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "safe/errors.hpp"

namespace safe {

namespace {

// Align-corners source coordinate for output index i.
double source_coord(std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1 || in == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
}

}  // namespace

DenseFeatureMap upsample(const DenseFeatureMap& map, std::size_t out_height, std::size_t out_width) {
    const std::size_t h = map.height(), w = map.width(), c = map.channels();
    if (out_height < h || out_width < w) {
        throw RangeError("upsample: output " + std::to_string(out_height) + "x" + std::to_string(out_width) +
                         " is smaller than input " + std::to_string(h) + "x" + std::to_string(w));
    }
    if (out_height == h && out_width == w) return map;

    Tensor out({out_height * out_width, c}, map.values().dtype());
    auto od = out.data();
    for (std::size_t i = 0; i < out_height; ++i) {
        const double sy = source_coord(i, h, out_height);
        const std::size_t y0 = std::min(static_cast<std::size_t>(std::floor(sy)), h - 1);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t j = 0; j < out_width; ++j) {
            const double sx = source_coord(j, w, out_width);
            const std::size_t x0 = std::min(static_cast<std::size_t>(std::floor(sx)), w - 1);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - static_cast<double>(x0);
            const auto a = map.cell(y0, x0), b = map.cell(y0, x1);
            const auto cc = map.cell(y1, x0), d = map.cell(y1, x1);
            double* dst = od.data() + (i * out_width + j) * c;
            for (std::size_t k = 0; k < c; ++k) {
                const double top = a[k] + fx * (b[k] - a[k]);
                const double bottom = cc[k] + fx * (d[k] - cc[k]);
                dst[k] = top + fy * (bottom - top);
            }
        }
    }
    out.round_to_dtype();
    return DenseFeatureMap(out_height, out_width, c, std::move(out));
}

MatchResult match_point(const DenseFeatureMap& source, const DenseFeatureMap& target, PixelPoint p) {
    if (source.channels() != target.channels()) {
        throw DimensionError("match_point: channel counts differ (" + std::to_string(source.channels()) + " vs " +
                             std::to_string(target.channels()) + ")");
    }
    if (p.x >= source.width() || p.y >= source.height()) {
        throw RangeError("match_point: source point (" + std::to_string(p.x) + ", " + std::to_string(p.y) +
                         ") outside the source grid");
    }
    const auto query = source.cell(p.y, p.x);
    if (norm2(query) < 1e-12) throw DegenerateError("match_point: source feature is zero");

    MatchResult r;
    r.heat = Tensor({target.height(), target.width()}, DType::Float64);
    auto hd = r.heat.data();
    std::size_t best = 0;
    for (std::size_t j = 0; j < target.locations(); ++j) {
        hd[j] = cosine_sim(query, target.cell(j));
        if (hd[j] > hd[best]) best = j;
    }
    r.target = {best % target.width(), best / target.width()};
    return r;
}

void export_heatmap(const Tensor& heat, const std::filesystem::path& pgm_path, const std::filesystem::path& csv_path) {
    if (heat.rank() != 2) throw DimensionError("export_heatmap: heat must be [H x W]");
    for (double v : heat.data()) {
        if (!std::isfinite(v)) throw DataError("export_heatmap: heat contains non-finite values");
    }
    const std::size_t h = heat.rows(), w = heat.cols();
    const auto [lo_it, hi_it] = std::minmax_element(heat.data().begin(), heat.data().end());
    const double lo = *lo_it, hi = *hi_it;

    std::ofstream pgm(pgm_path, std::ios::binary | std::ios::trunc);
    if (!pgm) throw DataError("cannot open " + pgm_path.string() + " for writing");
    pgm << "P5\n" << w << ' ' << h << "\n255\n";
    for (double v : heat.data()) {
        const unsigned char px =
            hi > lo ? static_cast<unsigned char>(std::lround(255.0 * (v - lo) / (hi - lo))) : 128;
        pgm.put(static_cast<char>(px));
    }
    if (!pgm) throw DataError("failed writing " + pgm_path.string());

    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw DataError("cannot open " + csv_path.string() + " for writing");
    csv << std::setprecision(9);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (c) csv << ',';
            csv << heat.at(r, c);
        }
        csv << '\n';
    }
    if (!csv) throw DataError("failed writing " + csv_path.string());
}

}  // namespace safe
