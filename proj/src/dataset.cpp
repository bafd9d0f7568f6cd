#include "cbpt/dataset.hpp"

#include <algorithm>

namespace cbpt {

namespace {

struct ClassStyle {
  double r, g, b;
  double cx, cy;  // fractional center
  int shape;
};

// one distinct shape per class: square, circle, triangle, hbar, vbar,
// cross, ring, diamond, x-cross, frame
const ClassStyle kStyles[10] = {
    {1.00, 0.15, 0.15, 0.28, 0.28, 0}, {0.15, 0.95, 0.15, 0.72, 0.28, 1},
    {0.25, 0.35, 1.00, 0.28, 0.72, 2}, {1.00, 0.95, 0.15, 0.72, 0.72, 3},
    {0.95, 0.20, 0.95, 0.50, 0.50, 4}, {0.15, 0.95, 0.95, 0.28, 0.50, 5},
    {1.00, 0.55, 0.10, 0.72, 0.50, 6}, {0.55, 0.20, 0.90, 0.50, 0.28, 7},
    {0.95, 0.95, 0.95, 0.50, 0.72, 8}, {0.55, 0.85, 0.30, 0.40, 0.60, 9}};

bool inside_shape(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return ax <= r && ay <= r;
    case 1: return dx * dx + dy * dy <= r * r;
    case 2: return dy >= -r && dy <= r && ax <= (r - dy) * 0.6;
    case 3: return ay <= r * 0.45 && ax <= r * 1.3;
    case 4: return ax <= r * 0.45 && ay <= r * 1.3;
    case 5: return (ax <= r * 0.35 || ay <= r * 0.35) && ax <= r && ay <= r;
    case 6: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * 0.45 * r * r;
    }
    case 7: return ax + ay <= r;
    case 8: return std::abs(ax - ay) <= r * 0.35 && ax <= r && ay <= r;
    default: return ax <= r && ay <= r && (ax >= r * 0.55 || ay >= r * 0.55);
  }
}

void render(double* img, int channels, int hw, int cls, Rng& rng) {
  const ClassStyle& st = kStyles[cls % 10];
  const double jitter = 0.06 * hw;
  const double cx = st.cx * hw + rng.uniform(-jitter, jitter);
  const double cy = st.cy * hw + rng.uniform(-jitter, jitter);
  const double radius = hw * rng.uniform(0.14, 0.20);
  const double cj = 0.08;
  double col[3] = {std::clamp(st.r + rng.uniform(-cj, cj), 0.0, 1.0),
                   std::clamp(st.g + rng.uniform(-cj, cj), 0.0, 1.0),
                   std::clamp(st.b + rng.uniform(-cj, cj), 0.0, 1.0)};
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      const double base = rng.uniform(0.05, 0.25);
      const bool in = inside_shape(st.shape, x - cx, y - cy, radius);
      for (int c = 0; c < channels; ++c) {
        double v = base;
        if (in) v = channels == 1 ? (col[0] + col[1] + col[2]) / 3.0 : col[c];
        img[(c * hw + y) * hw + x] = v;
      }
    }
}

}  // namespace

ToySplits make_toy_dataset(const ToyDataSpec& spec) {
  if (spec.classes < 2 || spec.train_per_class < 1 || spec.test_per_class < 1)
    throw ConfigError("make_toy_dataset: need >=2 classes and >=1 image per split");
  const int hw = spec.image_size;
  const int dim = spec.channels * hw * hw;
  ToySplits out;
  auto init = [&](Dataset& d, int per_class) {
    d.channels = spec.channels;
    d.image_size = hw;
    d.images.resize(dim, per_class * spec.classes);
    d.labels.resize(per_class * spec.classes);
  };
  init(out.train, spec.train_per_class);
  init(out.test, spec.test_per_class);
  for (int cls = 0; cls < spec.classes; ++cls) {
    Rng rng(derive_seed(spec.seed, "toy-class-" + std::to_string(cls)));
    for (int i = 0; i < spec.train_per_class; ++i) {
      const int col = cls * spec.train_per_class + i;
      render(out.train.images.col(col).data(), spec.channels, hw, cls, rng);
      out.train.labels[col] = cls;
    }
    for (int i = 0; i < spec.test_per_class; ++i) {
      const int col = cls * spec.test_per_class + i;
      render(out.test.images.col(col).data(), spec.channels, hw, cls, rng);
      out.test.labels[col] = cls;
    }
  }
  return out;
}

Dataset sample_shots(const Dataset& pool, int shots, std::uint64_t seed) {
  if (shots < 1) throw ContractError("sample_shots: shots must be >= 1");
  const int n_classes = pool.labels.empty() ? 0 : *std::max_element(pool.labels.begin(), pool.labels.end()) + 1;
  if (n_classes == 0) throw ContractError("sample_shots: empty pool");
  auto by_class = indices_by_class(pool, n_classes);
  Dataset out;
  out.channels = pool.channels;
  out.image_size = pool.image_size;
  out.images.resize(pool.images.rows(), n_classes * shots);
  out.labels.resize(n_classes * shots);
  Rng rng(derive_seed(seed, "shots"));
  int col = 0;
  for (int cls = 0; cls < n_classes; ++cls) {
    auto& idx = by_class[cls];
    if (static_cast<int>(idx.size()) < shots)
      throw ContractError("sample_shots: class " + std::to_string(cls) + " has fewer than " +
                          std::to_string(shots) + " images");
    rng.shuffle(idx);
    std::sort(idx.begin(), idx.begin() + shots);
    for (int s = 0; s < shots; ++s, ++col) {
      out.images.col(col) = pool.images.col(idx[s]);
      out.labels[col] = cls;
    }
  }
  return out;
}

std::vector<std::vector<int>> indices_by_class(const Dataset& ds, int n_classes) {
  std::vector<std::vector<int>> by_class(n_classes);
  for (int i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] >= 0 && ds.labels[i] < n_classes) by_class[ds.labels[i]].push_back(i);
  }
  return by_class;
}

}  // namespace cbpt
