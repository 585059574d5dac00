#include "tsseg/report.hpp"

#include "tsseg/archive.hpp"
#include "tsseg/metrics.hpp"

#include <png.h>

#include <cstdio>
#include <iomanip>
#include <limits>
#include <sstream>

namespace tsseg::report {

Image::Image(int w, int h, std::array<std::uint8_t, 3> fill) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3) {
  for (size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i));
}

void Image::set(int x, int y, std::array<std::uint8_t, 3> c) {
  const size_t o = (static_cast<size_t>(y) * width + x) * 3;
  rgb[o] = c[0];
  rgb[o + 1] = c[1];
  rgb[o + 2] = c[2];
}

std::array<std::uint8_t, 3> Image::get(int x, int y) const {
  const size_t o = (static_cast<size_t>(y) * width + x) * 3;
  return {rgb[o], rgb[o + 1], rgb[o + 2]};
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.rgb.data(), 0, nullptr))
    throw std::runtime_error("png: cannot size '" + path.string() + "': " + img.message);
  std::vector<std::uint8_t> bytes(size);
  if (!png_image_write_to_memory(&img, bytes.data(), &size, 0, image.rgb.data(), 0, nullptr))
    throw std::runtime_error("png: cannot encode '" + path.string() + "': " + img.message);
  bytes.resize(size);
  write_file_atomic(path, bytes);
}

Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw std::runtime_error("png: cannot read '" + path.string() + "': " + img.message);
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr))
    throw std::runtime_error("png: cannot decode '" + path.string() + "': " + img.message);
  return out;
}

std::array<std::uint8_t, 3> class_colour(int cls) {
  switch (cls) {
    case 0: return {0, 0, 0};
    case 1: return {220, 50, 47};
    case 2: return {80, 200, 90};
    case 3: return {250, 220, 60};
    default: return {150, 150, 150};
  }
}

namespace {

void blit(Image& dst, const Image& src, int ox, int oy) {
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) dst.set(ox + x, oy + y, src.get(x, y));
}

template <typename F>
Image render_grid(int w, int h, int scale, F&& colour) {
  Image out(w * scale, h * scale);
  for (int y = 0; y < h * scale; ++y)
    for (int x = 0; x < w * scale; ++x) out.set(x, y, colour(y / scale, x / scale));
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

std::string escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

/// Plot area helper shared by the charts.
struct Frame {
  double x0, y0, w, h;  // pixel box
  double xmin, xmax, ymin, ymax;
  double px(double x) const { return x0 + (xmax > xmin ? (x - xmin) / (xmax - xmin) : 0.5) * w; }
  double py(double y) const { return y0 + h - (ymax > ymin ? (y - ymin) / (ymax - ymin) : 0.5) * h; }
};

void axes(std::ostringstream& s, const Frame& f, const std::string& title, const std::string& xlabel,
          const std::string& ylabel) {
  s << "<text x='" << f.x0 + f.w / 2 << "' y='" << f.y0 - 12 << "' text-anchor='middle' font-size='14'>"
    << escape(title) << "</text>\n";
  s << "<rect x='" << f.x0 << "' y='" << f.y0 << "' width='" << f.w << "' height='" << f.h
    << "' fill='none' stroke='#444'/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.xmin + (f.xmax - f.xmin) * i / 4.0, yv = f.ymin + (f.ymax - f.ymin) * i / 4.0;
    s << "<text x='" << f.px(xv) << "' y='" << f.y0 + f.h + 16 << "' text-anchor='middle' font-size='10'>"
      << fmt(xv) << "</text>\n";
    s << "<text x='" << f.x0 - 6 << "' y='" << f.py(yv) + 3 << "' text-anchor='end' font-size='10'>" << fmt(yv)
      << "</text>\n";
    s << "<line x1='" << f.x0 << "' x2='" << f.x0 + f.w << "' y1='" << f.py(yv) << "' y2='" << f.py(yv)
      << "' stroke='#ddd'/>\n";
  }
  s << "<text x='" << f.x0 + f.w / 2 << "' y='" << f.y0 + f.h + 34 << "' text-anchor='middle' font-size='11'>"
    << escape(xlabel) << "</text>\n";
  s << "<text transform='translate(" << f.x0 - 42 << "," << f.y0 + f.h / 2
    << ") rotate(-90)' text-anchor='middle' font-size='11'>" << escape(ylabel) << "</text>\n";
}

void draw_series(std::ostringstream& s, const Frame& f, const std::vector<Series>& series) {
  for (size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    std::string pts;
    auto flush = [&] {
      if (!pts.empty())
        s << "<polyline fill='none' stroke='" << sr.colour << "' stroke-width='1.5' points='" << pts << "'/>\n";
      pts.clear();
    };
    for (size_t i = 0; i < sr.x.size() && i < sr.y.size(); ++i) {
      if (!std::isfinite(sr.y[i])) {
        flush();
        continue;
      }
      pts += fmt(f.px(sr.x[i])) + "," + fmt(f.py(sr.y[i])) + " ";
    }
    flush();
    const double ly = f.y0 + 14 + 14.0 * static_cast<double>(k);
    s << "<line x1='" << f.x0 + f.w - 120 << "' x2='" << f.x0 + f.w - 100 << "' y1='" << ly - 4 << "' y2='" << ly - 4
      << "' stroke='" << sr.colour << "' stroke-width='2'/>\n";
    s << "<text x='" << f.x0 + f.w - 96 << "' y='" << ly << "' font-size='10'>" << escape(sr.label) << "</text>\n";
  }
}

Frame frame_for(const std::vector<Series>& series, double x0, double y0, double w, double h) {
  Frame f{x0, y0, w, h, std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest(),
          std::numeric_limits<double>::max(), std::numeric_limits<double>::lowest()};
  for (const auto& sr : series) {
    for (double x : sr.x) f.xmin = std::min(f.xmin, x), f.xmax = std::max(f.xmax, x);
    for (double y : sr.y)
      if (std::isfinite(y)) f.ymin = std::min(f.ymin, y), f.ymax = std::max(f.ymax, y);
  }
  if (f.xmin > f.xmax) f.xmin = 0, f.xmax = 1;
  if (f.ymin > f.ymax) f.ymin = 0, f.ymax = 1;
  if (f.ymin > 0 && f.ymin < 0.5 * f.ymax) f.ymin = 0;
  return f;
}

void histogram_into(std::ostringstream& s, const Frame& base, const std::string& title, const std::string& xlabel,
                    const std::vector<double>& values, int bins) {
  Frame f = base;
  std::vector<double> counts(static_cast<size_t>(bins), 0.0);
  if (!values.empty()) {
    const auto stats = confidence_stats(values, bins);
    for (int b = 0; b < bins; ++b) counts[static_cast<size_t>(b)] = stats.histogram[static_cast<size_t>(b)];
    f.xmin = stats.min;
    f.xmax = stats.max > stats.min ? stats.max : stats.min + 1e-6;
  } else {
    f.xmin = 0, f.xmax = 1;
  }
  f.ymin = 0;
  f.ymax = std::max(1.0, *std::max_element(counts.begin(), counts.end()));
  axes(s, f, title, xlabel, "count");
  const double bw = f.w / bins;
  for (int b = 0; b < bins; ++b) {
    const double top = f.py(counts[static_cast<size_t>(b)]);
    s << "<rect x='" << f.x0 + b * bw + 1 << "' y='" << top << "' width='" << std::max(1.0, bw - 2) << "' height='"
      << f.y0 + f.h - top << "' fill='#4a7ab5'/>\n";
  }
}

std::string svg_open(int w, int h) {
  std::ostringstream s;
  s << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "' font-family='sans-serif'>\n"
    << "<rect width='100%' height='100%' fill='white'/>\n";
  return s.str();
}

}  // namespace

Image render_labels(const IndexGrid& labels, int scale) {
  return render_grid(static_cast<int>(labels.cols()), static_cast<int>(labels.rows()), scale,
                     [&](int y, int x) { return class_colour(labels(y, x)); });
}

Image render_channel(const Tensor<float>& image, int channel, int scale) {
  const auto row = image.data.row(channel);
  const float lo = row.minCoeff(), hi = row.maxCoeff();
  const float span = hi > lo ? hi - lo : 1.0f;
  return render_grid(image.width, image.height, scale, [&](int y, int x) {
    const auto v = static_cast<std::uint8_t>(std::lround(255.0f * (image(channel, y, x) - lo) / span));
    return std::array<std::uint8_t, 3>{v, v, v};
  });
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> difference_outline(const IndexGrid& a,
                                                                                       const IndexGrid& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("difference_outline: shape mismatch");
  const auto H = a.rows(), W = a.cols();
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> out(H, W);
  out.setConstant(false);
  auto differs = [&](Eigen::Index y, Eigen::Index x) { return a(y, x) != b(y, x); };
  for (Eigen::Index y = 0; y < H; ++y)
    for (Eigen::Index x = 0; x < W; ++x) {
      if (!differs(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == H - 1 || x == W - 1 || !differs(y - 1, x) || !differs(y + 1, x) ||
                        !differs(y, x - 1) || !differs(y, x + 1);
      out(y, x) = edge;
    }
  return out;
}

Image render_difference(const IndexGrid& truth, const IndexGrid& prediction, int scale) {
  const auto outline = difference_outline(truth, prediction);
  return render_grid(static_cast<int>(truth.cols()), static_cast<int>(truth.rows()), scale, [&](int y, int x) {
    if (outline(y, x)) return std::array<std::uint8_t, 3>{255, 255, 255};
    auto c = class_colour(truth(y, x));
    for (auto& v : c) v = static_cast<std::uint8_t>(v / 3);
    return c;
  });
}

std::string line_chart_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                           const std::vector<Series>& series) {
  std::ostringstream s;
  s << svg_open(640, 400);
  const Frame f = frame_for(series, 70, 40, 540, 300);
  axes(s, f, title, xlabel, ylabel);
  draw_series(s, f, series);
  s << "</svg>\n";
  return s.str();
}

std::string histogram_svg(const std::string& title, const std::string& xlabel, const std::vector<double>& values,
                          int bins) {
  std::ostringstream s;
  s << svg_open(640, 400);
  histogram_into(s, Frame{70, 40, 540, 300, 0, 1, 0, 1}, title, xlabel, values, bins);
  s << "</svg>\n";
  return s.str();
}

std::string learning_curves_svg(const TrainHistory& teacher, const TrainHistory& student) {
  auto build = [](const TrainHistory& h, bool dice) {
    Series train{dice ? "train dice" : "train loss", {}, {}, "#1f77b4"};
    Series val{dice ? "val dice" : "val loss", {}, {}, "#d62728"};
    for (const auto& r : h) {
      train.x.push_back(r.epoch);
      train.y.push_back(dice ? r.train_dice : r.train_loss);
      val.x.push_back(r.epoch);
      const auto v = dice ? r.val_dice : r.val_loss;
      val.y.push_back(v ? *v : std::numeric_limits<double>::quiet_NaN());
    }
    return std::vector<Series>{train, val};
  };
  std::ostringstream s;
  s << svg_open(1280, 800);
  const std::pair<const TrainHistory*, std::string> panels[2] = {{&teacher, "Teacher"}, {&student, "Student"}};
  for (int row = 0; row < 2; ++row)
    for (int col = 0; col < 2; ++col) {
      const bool dice = col == 1;
      const auto series = build(*panels[row].first, dice);
      const Frame f = frame_for(series, 70 + 640.0 * col, 40 + 400.0 * row, 540, 300);
      axes(s, f, panels[row].second + (dice ? " Dice" : " loss"), "epoch", dice ? "Dice" : "loss");
      // Stage boundaries on the student curves.
      const auto& h = *panels[row].first;
      for (size_t i = 1; i < h.size(); ++i)
        if (h[i].stage != h[i - 1].stage)
          s << "<line x1='" << f.px(h[i].epoch - 0.5) << "' x2='" << f.px(h[i].epoch - 0.5) << "' y1='" << f.y0
            << "' y2='" << f.y0 + f.h << "' stroke='#999' stroke-dasharray='4 3'/>\n";
      draw_series(s, f, series);
    }
  s << "</svg>\n";
  return s.str();
}

std::string confidence_svg(const std::vector<double>& image_confidence) {
  std::ostringstream s;
  s << svg_open(1280, 400);
  histogram_into(s, Frame{70, 40, 540, 300, 0, 1, 0, 1}, "Image confidence distribution", "image confidence",
                 image_confidence, 20);
  std::vector<double> sorted = image_confidence;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  Series curve{"sorted confidence", {}, sorted, "#2ca02c"};
  for (size_t i = 0; i < sorted.size(); ++i) curve.x.push_back(static_cast<double>(i + 1));
  const Frame f = frame_for({curve}, 710, 40, 540, 300);
  axes(s, f, "Confidence by rank", "rank", "image confidence");
  draw_series(s, f, {curve});
  s << "</svg>\n";
  return s.str();
}

std::string agreement_histogram_svg(const std::vector<double>& fractions) {
  return histogram_svg("Teacher-student agreement", "agreement fraction", fractions, 20);
}

Image agreement_mosaic(const std::vector<IndexGrid>& maps, int columns, int scale) {
  if (maps.empty()) return Image(1, 1, {255, 255, 255});
  columns = std::max(1, std::min<int>(columns, static_cast<int>(maps.size())));
  const int rows = (static_cast<int>(maps.size()) + columns - 1) / columns;
  const int tw = static_cast<int>(maps.front().cols()) * scale, th = static_cast<int>(maps.front().rows()) * scale;
  Image out(columns * (tw + 2), rows * (th + 2), {90, 90, 90});
  for (size_t i = 0; i < maps.size(); ++i) {
    const auto& m = maps[i];
    const Image tile = render_grid(static_cast<int>(m.cols()), static_cast<int>(m.rows()), scale, [&](int y, int x) {
      return m(y, x) ? std::array<std::uint8_t, 3>{255, 255, 255} : std::array<std::uint8_t, 3>{200, 30, 30};
    });
    blit(out, tile, static_cast<int>(i % columns) * (tw + 2) + 1, static_cast<int>(i / columns) * (th + 2) + 1);
  }
  return out;
}

Image case_panels(const std::vector<CasePanel>& cases, int scale) {
  if (cases.empty()) return Image(1, 1, {255, 255, 255});
  const int tw = cases.front().image.width * scale, th = cases.front().image.height * scale;
  Image out(5 * (tw + 4), static_cast<int>(cases.size()) * (th + 4), {255, 255, 255});
  for (size_t r = 0; r < cases.size(); ++r) {
    const auto& c = cases[r];
    const Image tiles[5] = {render_channel(c.image, c.image.channels() > 3 ? 3 : 0, scale),
                            render_labels(c.truth, scale), render_labels(c.teacher, scale),
                            render_labels(c.student, scale), render_difference(c.truth, c.student, scale)};
    for (int k = 0; k < 5; ++k) blit(out, tiles[k], k * (tw + 4) + 2, static_cast<int>(r) * (th + 4) + 2);
  }
  return out;
}

}  // namespace tsseg::report
