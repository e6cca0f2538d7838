#include "oslo/image.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "oslo/errors.hpp"

namespace oslo {

void validate(const Image& image) {
  if (image.height <= 0 || image.width <= 0 || image.channels <= 0) {
    throw InputError(fmt::format("image has non-positive shape {}x{}x{}", image.height, image.width, image.channels));
  }
  const size_t expected = static_cast<size_t>(image.height) * image.width * image.channels;
  if (image.pixels.size() != expected) {
    throw InputError(fmt::format("image buffer holds {} values, shape needs {}", image.pixels.size(), expected));
  }
  for (double v : image.pixels) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError(fmt::format("image intensity {} outside [0, 1]", v));
  }
}

double luminance(const Image& image, int y, int x) {
  if (image.channels >= 3) {
    return 0.299 * image.at(y, x, 0) + 0.587 * image.at(y, x, 1) + 0.114 * image.at(y, x, 2);
  }
  return image.at(y, x, 0);
}

Image quantize_8bit(Image image) {
  for (double& v : image.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return image;
}

Image to_rgb(Image image) {
  if (image.channels == 3) return image;
  Image out(image.height, image.width, 3);
  out.domain_tag = image.domain_tag;
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = image.channels >= 3 ? image.at(y, x, c) : image.at(y, x, 0);
      }
    }
  }
  return out;
}

namespace {

Image from_mat(const cv::Mat& mat, bool bgr) {
  cv::Mat rgb;
  if (!bgr) {
    rgb = mat;
  } else if (mat.channels() == 3) {
    cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB);
  } else if (mat.channels() == 4) {
    cv::cvtColor(mat, rgb, cv::COLOR_BGRA2RGB);
  } else {
    rgb = mat;
  }
  cv::Mat f;
  double s = rgb.depth() == CV_16U ? 1.0 / 65535.0 : (rgb.depth() == CV_8U ? 1.0 / 255.0 : 1.0);
  rgb.convertTo(f, CV_64F, s);
  Image img(f.rows, f.cols, f.channels());
  const double* data = f.ptr<double>(0);
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    // Contiguous after convertTo.
    img.pixels[i] = std::clamp(data[i], 0.0, 1.0);
  }
  return img;
}

cv::Mat to_mat(const Image& image) {
  cv::Mat f(image.height, image.width, CV_MAKETYPE(CV_64F, image.channels));
  std::copy(image.pixels.begin(), image.pixels.end(), f.ptr<double>(0));
  return f;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw InputError(fmt::format("cannot decode image '{}'", path.string()));
  return from_mat(mat, true);
}

Image decode_image(std::span<const unsigned char> bytes) {
  if (bytes.empty()) throw InputError("cannot decode an empty image buffer");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<unsigned char*>(bytes.data()));
  cv::Mat mat = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  if (mat.empty()) throw InputError("cannot decode image buffer");
  return from_mat(mat, true);
}

void save_png(const Image& image, const std::filesystem::path& path) {
  validate(image);
  cv::Mat u8(image.height, image.width, CV_MAKETYPE(CV_8U, image.channels));
  unsigned char* out = u8.ptr<unsigned char>(0);
  for (size_t i = 0; i < image.pixels.size(); ++i) {
    out[i] = static_cast<unsigned char>(std::round(image.pixels[i] * 255.0));
  }
  if (image.channels == 3) cv::cvtColor(u8, u8, cv::COLOR_RGB2BGR);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), u8)) throw std::runtime_error(fmt::format("cannot write '{}'", path.string()));
}

Image resize_center_crop(const Image& image, int size) {
  validate(image);
  if (size <= 0) throw InputError("crop size must be positive");
  if (image.height == size && image.width == size) return image;
  cv::Mat f = to_mat(image);
  const double scale = static_cast<double>(size) / std::min(image.height, image.width);
  const int h = std::max(size, static_cast<int>(std::lround(image.height * scale)));
  const int w = std::max(size, static_cast<int>(std::lround(image.width * scale)));
  cv::Mat resized;
  cv::resize(f, resized, cv::Size(w, h), 0, 0, cv::INTER_AREA);
  cv::Mat crop = resized(cv::Rect((w - size) / 2, (h - size) / 2, size, size)).clone();
  Image out = from_mat(crop, false);
  out.domain_tag = image.domain_tag;
  return out;
}

}  // namespace oslo
