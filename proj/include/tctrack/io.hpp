#pragma once

// OTB-style sequence directories:
//   <dir>/img/0001.jpg, 0002.jpg, ...   (any format OpenCV decodes)
//   <dir>/groundtruth.txt               one "x,y,w,h" per frame, top-left corner
// Requires linking OpenCV core + imgcodecs (target tctrack_io).

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "tctrack/tracker.hpp"

namespace tctrack {

/// Decodes an image into a (3, H, W) RGB tensor with values in [0, 1].
inline Tensor read_image(const std::string& path) {
  const cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
  if (m.empty()) throw IngestionError("cannot read image '" + path + "'");
  const auto h = static_cast<std::int64_t>(m.rows), w = static_cast<std::int64_t>(m.cols);
  Tensor t({3, h, w});
  for (std::int64_t y = 0; y < h; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(static_cast<int>(y));
    for (std::int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) t.at(c, y, x) = row[x][2 - c] / 255.0;  // BGR -> RGB
  }
  return t;
}

inline void write_image(const Tensor& img, const std::string& path) {
  if (img.rank() != 3 || img.dim(0) != 3) throw DimensionError("write_image expects (3,H,W), got " + shape_str(img.shape()));
  const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        m.at<cv::Vec3b>(y, x)[2 - c] = cv::saturate_cast<uchar>(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0));
  if (!cv::imwrite(path, m)) throw IngestionError("cannot write image '" + path + "'");
}

/// Parses ground truth; fields may be separated by commas, tabs or spaces.
inline std::vector<BoundingBox> parse_groundtruth(std::istream& in, const std::string& source) {
  std::vector<BoundingBox> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string norm = line;
    std::replace(norm.begin(), norm.end(), ',', ' ');
    std::replace(norm.begin(), norm.end(), '\t', ' ');
    std::istringstream ls(norm);
    double v[4];
    int n = 0;
    while (n < 4 && ls >> v[n]) ++n;
    const auto where = source + ":" + std::to_string(lineno) + ": ";
    std::string rest;
    if (n != 4 || ls >> rest)
      throw IngestionError(where + "expected 4 values x,y,w,h, got '" + line + "'");
    for (double x : v)
      if (!std::isfinite(x)) throw IngestionError(where + "non-finite value in '" + line + "'");
    if (!(v[2] > 0.0) || !(v[3] > 0.0)) throw IngestionError(where + "width and height must be positive");
    out.push_back(BoundingBox::from_top_left(v[0], v[1], v[2], v[3]));
  }
  return out;
}

inline bool is_image_file(const std::filesystem::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png" || ext == ".bmp";
}

inline Sequence load_sequence(const std::string& dir, double fps = 30.0) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const fs::path gt_path = root / "groundtruth.txt";
  std::ifstream gt(gt_path);
  if (!gt) throw IngestionError("missing '" + gt_path.string() + "'");
  Sequence s;
  s.name = root.filename().empty() ? root.parent_path().filename().string() : root.filename().string();
  s.fps = fps;
  s.groundtruth = parse_groundtruth(gt, gt_path.string());

  const fs::path img_dir = root / "img";
  if (!fs::is_directory(img_dir)) throw IngestionError("missing image directory '" + img_dir.string() + "'");
  for (const auto& e : fs::directory_iterator(img_dir))
    if (e.is_regular_file() && is_image_file(e.path())) s.frame_paths.push_back(e.path().string());
  std::sort(s.frame_paths.begin(), s.frame_paths.end());
  if (s.frame_paths.size() > s.groundtruth.size())
    throw IngestionError(gt_path.string() + ":" + std::to_string(s.groundtruth.size() + 1) + ": missing ground-truth line for '" +
                         s.frame_paths[s.groundtruth.size()] + "'");
  if (s.frame_paths.size() < s.groundtruth.size())
    throw IngestionError(gt_path.string() + ": " + std::to_string(s.groundtruth.size()) + " boxes but only " +
                         std::to_string(s.frame_paths.size()) + " images in '" + img_dir.string() + "'");
  for (const auto& p : s.frame_paths)
    if (!cv::haveImageReader(p)) throw IngestionError("unreadable image '" + p + "'");
  auto paths = s.frame_paths;
  s.loader = [paths](std::size_t i) { return read_image(paths.at(i)); };
  s.validate();
  return s;
}

/// Writes a clip as an OTB-style directory (PNG frames, full-precision ground truth).
inline void write_sequence(const Clip& clip, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "img");
  std::ofstream gt(fs::path(dir) / "groundtruth.txt");
  gt.precision(17);
  for (std::size_t i = 0; i < clip.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%04zu.png", i + 1);
    write_image(clip.frames[i], (fs::path(dir) / "img" / name).string());
    const auto& b = clip.boxes[i];
    gt << b.x1() << ',' << b.y1() << ',' << b.w << ',' << b.h << '\n';
  }
}

}  // namespace tctrack
