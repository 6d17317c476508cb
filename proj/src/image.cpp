#include "comet/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace comet {

Image::Image(int w, int h, std::uint8_t fill) : width(w), height(h) {
  if (w <= 0 || h <= 0) throw ImageError("image: dimensions must be positive");
  rgb.assign(static_cast<std::size_t>(w) * h * 3, fill);
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(ch);
  }
  return tok;
}

int header_int(std::istream& in, const std::filesystem::path& path, const char* what) {
  const std::string tok = header_token(in);
  try {
    std::size_t used = 0;
    const int v = std::stoi(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    throw ImageError(path.string() + ": bad PPM " + what + " '" + tok + "'");
  }
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') {
    throw ImageError(path.string() + ": unsupported image magic (expected binary P6)");
  }
  const int w = header_int(in, path, "width");
  const int h = header_int(in, path, "height");
  const int maxval = header_int(in, path, "maxval");
  if (w <= 0 || h <= 0) throw ImageError(path.string() + ": non-positive dimensions");
  if (maxval != 255) throw ImageError(path.string() + ": only maxval 255 is supported");
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw ImageError(path.string() + ": truncated pixel data");
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (!out) throw ImageError("write failed for " + path.string());
}

void crop_patch(const Image& img, const CropSpec& crop, float* dst) {
  const int s = crop.out_size();
  const double inv = 1.0 / crop.scale();
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  // Separable sample positions; pixel centers sit at integer + 0.5.
  auto axis = [&](double origin, int limit, std::vector<int>& i0, std::vector<int>& i1, std::vector<float>& t) {
    i0.resize(s);
    i1.resize(s);
    t.resize(s);
    for (int u = 0; u < s; ++u) {
      const double x = origin + (u + 0.5) * inv - 0.5;
      const double fl = std::floor(x);
      const int a = static_cast<int>(fl);
      i0[u] = std::clamp(a, 0, limit - 1);
      i1[u] = std::clamp(a + 1, 0, limit - 1);
      t[u] = static_cast<float>(x - fl);
    }
  };
  std::vector<int> x0, x1, y0, y1;
  std::vector<float> tx, ty;
  axis(crop.left(), img.width, x0, x1, tx);
  axis(crop.top(), img.height, y0, y1, ty);
  for (int v = 0; v < s; ++v) {
    for (int u = 0; u < s; ++u) {
      const std::uint8_t* a = img.px(x0[u], y0[v]);
      const std::uint8_t* b = img.px(x1[u], y0[v]);
      const std::uint8_t* c = img.px(x0[u], y1[v]);
      const std::uint8_t* d = img.px(x1[u], y1[v]);
      for (int ch = 0; ch < 3; ++ch) {
        const float top = a[ch] + (b[ch] - a[ch]) * tx[u];
        const float bot = c[ch] + (d[ch] - c[ch]) * tx[u];
        dst[ch * plane + static_cast<std::size_t>(v) * s + u] = (top + (bot - top) * ty[v]) / 255.0f;
      }
    }
  }
}

Tensor<float> crop_patch(const Image& img, const CropSpec& crop) {
  Tensor<float> t({3, crop.out_size(), crop.out_size()});
  crop_patch(img, crop, t.data());
  return t;
}

std::vector<float> grayscale(const Image& img) {
  std::vector<float> g(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = (img.rgb[3 * i] + img.rgb[3 * i + 1] + img.rgb[3 * i + 2]) / (3.0f * 255.0f);
  }
  return g;
}

}  // namespace comet
