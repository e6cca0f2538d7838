#include "oslo/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "oslo/data.hpp"
#include "oslo/errors.hpp"
#include "oslo/rng.hpp"

namespace oslo {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

using Rgb = std::array<double, 3>;

bool in_polygon(double x, double y, const std::vector<std::pair<double, double>>& poly) {
  bool inside = false;
  for (size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto [xi, yi] = poly[i];
    const auto [xj, yj] = poly[j];
    if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

const std::vector<std::pair<double, double>>& star_polygon() {
  static const auto poly = [] {
    std::vector<std::pair<double, double>> p;
    for (int i = 0; i < 10; ++i) {
      const double r = i % 2 == 0 ? 1.0 : 0.42;
      const double a = std::numbers::pi / 2 + i * std::numbers::pi / 5;
      p.emplace_back(r * std::cos(a), r * std::sin(a));
    }
    return p;
  }();
  return poly;
}

const std::vector<std::pair<double, double>>& triangle_polygon() {
  static const std::vector<std::pair<double, double>> poly{{0.0, 1.0}, {-0.92, -0.62}, {0.92, -0.62}};
  return poly;
}

// Shape membership in unit coordinates.
bool inside(const std::string& shape, double x, double y) {
  const double r = std::hypot(x, y);
  if (shape == "circle") return r <= 1.0;
  if (shape == "ring") return r <= 1.0 && r >= 0.62;
  if (shape == "square") return std::max(std::abs(x), std::abs(y)) <= 0.82;
  if (shape == "diamond") return std::abs(x) + std::abs(y) <= 1.0;
  if (shape == "cross") {
    return (std::abs(x) <= 0.3 && std::abs(y) <= 1.0) || (std::abs(y) <= 0.3 && std::abs(x) <= 1.0);
  }
  if (shape == "triangle") return in_polygon(x, y, triangle_polygon());
  if (shape == "star") return in_polygon(x, y, star_polygon());
  return false;
}

Rgb hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

}  // namespace

const std::vector<std::string>& renderable_shapes() {
  static const std::vector<std::string> shapes{"circle", "cross", "diamond", "ring", "square", "star", "triangle"};
  return shapes;
}

const std::vector<std::string>& synthetic_styles() { return dataset_info("synthetic_shapes").domains; }

Image render_shape(const std::string& shape_name, const std::string& style_name, std::uint64_t seed, int size) {
  const std::string shape = lower(shape_name);
  const std::string style = lower(style_name);
  const auto& shapes = renderable_shapes();
  const auto& styles = synthetic_styles();
  if (std::find(shapes.begin(), shapes.end(), shape) == shapes.end()) {
    throw InputError(fmt::format("cannot render shape '{}'", shape_name));
  }
  if (std::find(styles.begin(), styles.end(), style) == styles.end()) {
    throw InputError(fmt::format("unknown rendering style '{}'", style_name));
  }
  if (size < 4) throw InputError("render size must be at least 4");

  Rng rng(mix_seed(seed, fnv1a(shape + "/" + style)));
  const double scale = rng.uniform(0.55, 0.75);
  const double angle = rng.uniform(-0.35, 0.35);
  const double cx = rng.uniform(-0.12, 0.12), cy = rng.uniform(-0.12, 0.12);
  const double hue = rng.uniform(0.0, 1.0);
  const double ca = std::cos(angle), sa = std::sin(angle);

  Rgb bg, fg, fg2;
  if (style == "flat") {
    bg = {0.95, 0.95, 0.92};
    fg = hsv(0.0 + 0.08 * hue, 0.85, 0.85);
  } else if (style == "outline") {
    bg = {0.08, 0.08, 0.12};
    fg = hsv(0.5 + 0.1 * hue, 0.6, 1.0);
  } else if (style == "striped") {
    bg = {0.85, 0.9, 0.8};
    fg = hsv(0.3 + 0.1 * hue, 0.8, 0.5);
    fg2 = hsv(0.15 + 0.1 * hue, 0.7, 0.95);
  } else {
    bg = {0.75, 0.7, 0.85};
    fg = hsv(0.75 + 0.1 * hue, 0.8, 0.35);
    fg2 = {0.98, 0.98, 0.98};
  }

  Image img(size, size, 3);
  constexpr int ss = 3;  // supersampling per axis
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          // Image coordinates in [-1, 1], y up.
          const double u = (px + (sx + 0.5) / ss) / size * 2.0 - 1.0;
          const double v = 1.0 - (py + (sy + 0.5) / ss) / size * 2.0;
          const double du = (u - cx) / scale, dv = (v - cy) / scale;
          const double x = ca * du + sa * dv, y = -sa * du + ca * dv;
          Rgb c = bg;
          if (style == "outline") {
            if (inside(shape, x, y) && !inside(shape, x / 0.72, y / 0.72)) c = fg;
          } else if (inside(shape, x, y)) {
            if (style == "flat") {
              c = fg;
            } else if (style == "striped") {
              c = std::fmod(std::abs(u + v) * 4.0, 1.0) < 0.5 ? fg : fg2;
            } else {
              const double gx = std::fmod(u * 4.0 + 8.0, 1.0) - 0.5, gy = std::fmod(v * 4.0 + 8.0, 1.0) - 0.5;
              c = std::hypot(gx, gy) < 0.28 ? fg2 : fg;
            }
          }
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      }
      for (int k = 0; k < 3; ++k) {
        const double noise = style == "dotted" ? 0.04 * rng.normal() : 0.0;
        img.at(py, px, k) = std::clamp(acc[k] / (ss * ss) + noise, 0.0, 1.0);
      }
    }
  }
  img.domain_tag = style;
  return img;
}

Image SyntheticImageClient::generate(const std::string& prompt, std::uint64_t seed) {
  static const std::string head = "Generate images in the style of ";
  static const std::string mid = " depicting ";
  const auto m = prompt.find(mid);
  if (prompt.rfind(head, 0) != 0 || m == std::string::npos) {
    throw ServiceError(fmt::format("renderer cannot interpret prompt '{}'", prompt));
  }
  const std::string style = prompt.substr(head.size(), m - head.size());
  const std::string shape = prompt.substr(m + mid.size());
  try {
    return render_shape(shape, style, seed, size_);
  } catch (const InputError& e) {
    throw ServiceError(e.what());
  }
}

void write_synthetic_dataset(const std::filesystem::path& root, int images_per_class, std::uint64_t seed, int size) {
  if (images_per_class < 1) throw InputError("images_per_class must be at least 1");
  const DatasetInfo& info = dataset_info("synthetic_shapes");
  for (const auto& style : info.domains) {
    for (const auto& shape : info.class_names) {
      for (int i = 0; i < images_per_class; ++i) {
        const std::uint64_t s = mix_seed(seed, fnv1a(fmt::format("{}/{}/{}", style, shape, i)));
        save_png(render_shape(shape, style, s, size), root / style / shape / fmt::format("{:03d}.png", i));
      }
    }
  }
}

}  // namespace oslo
