#include "tsseg/core.hpp"

#include <set>

namespace tsseg {

void validate_volume(const Volume& v) {
  if (v.height() < 8 || v.width() < 8)
    throw ShapeError("volume '" + v.id + "': spatial size " + std::to_string(v.height()) + "x" +
                     std::to_string(v.width()) + " is below the 8x8 minimum");
  if (v.channels() < 1) throw ShapeError("volume '" + v.id + "': no channels");
  if (static_cast<int>(v.channel_roles.size()) != v.channels())
    throw ShapeError("volume '" + v.id + "': " + std::to_string(v.channel_roles.size()) +
                     " channel roles for " + std::to_string(v.channels()) + " channels");
  if (!v.image.data.allFinite()) throw std::invalid_argument("volume '" + v.id + "': non-finite intensity");
  if (v.spacing && v.spacing->size() != 2 && v.spacing->size() != 3)
    throw ShapeError("volume '" + v.id + "': spacing must have 2 or 3 entries");
}

Volume make_volume(std::string id, Tensor<float> image, std::vector<std::string> roles,
                   std::optional<std::vector<float>> spacing) {
  Volume v{std::move(id), std::move(image), std::move(roles), std::move(spacing)};
  validate_volume(v);
  return v;
}

LabelMask make_label_mask(IndexGrid classes, int num_classes) {
  if (num_classes < 1) throw std::invalid_argument("label mask: class count must be positive");
  if (classes.size() > 0 && (classes.minCoeff() < 0 || classes.maxCoeff() >= num_classes))
    throw std::out_of_range("label mask: class id outside [0," + std::to_string(num_classes) + ")");
  return LabelMask{std::move(classes), num_classes};
}

void validate_set(const LabeledSet& set) {
  std::set<std::string> ids;
  for (const auto& s : set) {
    validate_volume(s.volume);
    if (!ids.insert(s.volume.id).second) throw std::invalid_argument("duplicate sample id '" + s.volume.id + "'");
    if (s.mask.height() != s.volume.height() || s.mask.width() != s.volume.width())
      throw ShapeError("sample '" + s.volume.id + "': mask shape differs from image shape");
    if (!set.empty() && !s.volume.image.same_shape(set.front().volume.image))
      throw ShapeError("sample '" + s.volume.id + "': shape differs from the rest of the set");
  }
}

void validate_set(const UnlabeledSet& set) {
  std::set<std::string> ids;
  for (const auto& v : set) {
    validate_volume(v);
    if (!ids.insert(v.id).second) throw std::invalid_argument("duplicate sample id '" + v.id + "'");
    if (!v.image.same_shape(set.front().image))
      throw ShapeError("sample '" + v.id + "': shape differs from the rest of the set");
  }
}

}  // namespace tsseg
