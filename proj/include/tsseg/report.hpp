#pragma once

#include "tsseg/training.hpp"

#include <array>
#include <filesystem>

namespace tsseg::report {

/// 8-bit RGB raster, row-major.
struct Image {
  int width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h, std::array<std::uint8_t, 3> fill = {0, 0, 0});
  void set(int x, int y, std::array<std::uint8_t, 3> c);
  std::array<std::uint8_t, 3> get(int x, int y) const;
};

void write_png(const std::filesystem::path& path, const Image& image);
Image read_png(const std::filesystem::path& path);

/// Colour for each class id: black, red, green, yellow, then grey.
std::array<std::uint8_t, 3> class_colour(int cls);

Image render_labels(const IndexGrid& labels, int scale = 1);
/// Channel scaled to its own min..max as grey.
Image render_channel(const Tensor<float>& image, int channel, int scale = 1);

/// Pixels where a and b disagree and at least one 4-neighbour agrees
/// (or lies on the border): the outline of the disagreement region.
/// Empty (all false) for identical maps.
Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> difference_outline(const IndexGrid& a,
                                                                                       const IndexGrid& b);

/// Ground truth with the outline of prediction errors drawn in white.
Image render_difference(const IndexGrid& truth, const IndexGrid& prediction, int scale = 1);

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string colour;
};

/// Line chart with axes, ticks and a legend. NaN y values break the line.
std::string line_chart_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                           const std::vector<Series>& series);

std::string histogram_svg(const std::string& title, const std::string& xlabel, const std::vector<double>& values,
                          int bins);

/// Teacher and student loss and val Dice per epoch; stage boundaries are
/// marked on the student curves.
std::string learning_curves_svg(const TrainHistory& teacher, const TrainHistory& student);

/// Histogram of image-level confidence next to the sorted-confidence curve.
std::string confidence_svg(const std::vector<double>& image_confidence);

/// Per-sample agreement fractions as a histogram.
std::string agreement_histogram_svg(const std::vector<double>& fractions);

/// Grid of agreement maps (white agree, red disagree), one tile per sample.
Image agreement_mosaic(const std::vector<IndexGrid>& maps, int columns, int scale = 2);

struct CasePanel {
  std::string id;
  Tensor<float> image;
  IndexGrid truth, teacher, student;
};

/// One row per case: input (first channel), ground truth, teacher,
/// student, and the student-vs-truth difference outline.
Image case_panels(const std::vector<CasePanel>& cases, int scale = 2);

}  // namespace tsseg::report
