#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "p2p/geometry.hpp"
#include "p2p/pointcloud.hpp"

namespace p2p::data {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace fs = std::filesystem;

// ---- raw scan files: packed float32 x,y,z,intensity ----

inline PointCloud load_velodyne(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open scan file: " + path.string());
  const std::streamoff bytes = in.tellg();
  if (bytes % 16 != 0)
    throw TruncatedFile("scan file size not a multiple of 16: " + path.string());
  in.seekg(0);
  const size_t n = size_t(bytes) / 16;
  std::vector<float> raw(n * 4);
  in.read(reinterpret_cast<char*>(raw.data()), bytes);
  if (!in) throw TruncatedFile("short read on scan file: " + path.string());
  PointCloud cloud;
  cloud.pts.resize(n);
  cloud.intensity.resize(n);
  for (size_t i = 0; i < n; ++i) {
    cloud.pts[i] = {double(raw[4 * i]), double(raw[4 * i + 1]), double(raw[4 * i + 2])};
    cloud.intensity[i] = double(raw[4 * i + 3]);
  }
  return cloud;
}

inline void save_velodyne(const fs::path& path, const PointCloud& cloud) {
  cloud.check();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write scan file: " + path.string());
  std::vector<float> raw(cloud.size() * 4);
  for (size_t i = 0; i < cloud.size(); ++i) {
    raw[4 * i] = float(cloud.pts[i].x);
    raw[4 * i + 1] = float(cloud.pts[i].y);
    raw[4 * i + 2] = float(cloud.pts[i].z);
    raw[4 * i + 3] = cloud.intensity.empty() ? 0.0f : float(cloud.intensity[i]);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), std::streamsize(raw.size() * 4));
  if (!out) throw IoError("short write on scan file: " + path.string());
}

// ---- per-sequence object labels ----
// line: frame track_id type truncated occluded alpha bbox(4) dims(3: h w l)
//       location(3, camera frame, box bottom center) rotation_y [score]

struct ObjectLabel {
  int frame = 0;
  int track_id = 0;
  std::string type = "Car";
  double truncated = 0.0;
  int occluded = 0;
  double alpha = 0.0;
  std::array<double, 4> bbox = {0, 0, 0, 0};
  double h = 0.0, w = 0.0, l = 0.0;
  double x = 0.0, y = 0.0, z = 0.0;
  double ry = 0.0;
  double score = std::numeric_limits<double>::quiet_NaN();

  bool has_score() const { return !std::isnan(score); }
};

inline ObjectLabel parse_label_line(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> tok;
  std::string t;
  while (in >> t) tok.push_back(t);
  if (tok.size() != 17 && tok.size() != 18)
    throw MalformedLine("label line needs 17 or 18 fields, got " +
                        std::to_string(tok.size()) + ": " + line);
  ObjectLabel lab;
  try {
    size_t i = 0;
    lab.frame = std::stoi(tok[i++]);
    lab.track_id = std::stoi(tok[i++]);
    lab.type = tok[i++];
    lab.truncated = std::stod(tok[i++]);
    lab.occluded = std::stoi(tok[i++]);
    lab.alpha = std::stod(tok[i++]);
    for (auto& b : lab.bbox) b = std::stod(tok[i++]);
    lab.h = std::stod(tok[i++]);
    lab.w = std::stod(tok[i++]);
    lab.l = std::stod(tok[i++]);
    lab.x = std::stod(tok[i++]);
    lab.y = std::stod(tok[i++]);
    lab.z = std::stod(tok[i++]);
    lab.ry = std::stod(tok[i++]);
    if (i < tok.size()) lab.score = std::stod(tok[i++]);
  } catch (const std::logic_error&) {
    throw MalformedLine("unparsable label field in: " + line);
  }
  return lab;
}

inline std::string format_label_line(const ObjectLabel& lab) {
  char buf[512];
  int n = std::snprintf(buf, sizeof buf,
                        "%d %d %s %.6f %d %.6f %.6f %.6f %.6f %.6f %.6f %.6f %.6f "
                        "%.6f %.6f %.6f %.6f",
                        lab.frame, lab.track_id, lab.type.c_str(), lab.truncated,
                        lab.occluded, lab.alpha, lab.bbox[0], lab.bbox[1], lab.bbox[2],
                        lab.bbox[3], lab.h, lab.w, lab.l, lab.x, lab.y, lab.z, lab.ry);
  std::string s(buf, size_t(n));
  if (lab.has_score()) {
    n = std::snprintf(buf, sizeof buf, " %.6f", lab.score);
    s.append(buf, size_t(n));
  }
  return s;
}

inline std::vector<ObjectLabel> load_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label file: " + path.string());
  std::vector<ObjectLabel> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(parse_label_line(line));
  }
  return out;
}

inline void save_labels(const fs::path& path, const std::vector<ObjectLabel>& labels) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write label file: " + path.string());
  for (const auto& lab : labels) out << format_label_line(lab) << "\n";
  if (!out) throw IoError("short write on label file: " + path.string());
}

// ---- calibration ----

struct RigidTransform {
  std::array<double, 9> R = {1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  Vec3 t;

  Vec3 apply(const Vec3& p) const {
    return {R[0] * p.x + R[1] * p.y + R[2] * p.z + t.x,
            R[3] * p.x + R[4] * p.y + R[5] * p.z + t.y,
            R[6] * p.x + R[7] * p.y + R[8] * p.z + t.z};
  }
  RigidTransform inverse() const {
    RigidTransform inv;
    inv.R = {R[0], R[3], R[6], R[1], R[4], R[7], R[2], R[5], R[8]};
    Vec3 rt = inv.apply({t.x, t.y, t.z});  // inv.t is zero here
    inv.t = {-rt.x, -rt.y, -rt.z};
    return inv;
  }
};

struct CalibData {
  std::map<std::string, std::vector<double>> entries;

  // sensor-to-camera rigid transform from a 3x4 row-major entry
  RigidTransform velo_to_cam() const {
    auto it = entries.find("Tr_velo_cam");
    if (it == entries.end()) it = entries.find("Tr_velo_to_cam");
    if (it == entries.end() || it->second.size() != 12)
      throw MissingCalib("no 3x4 Tr_velo_cam / Tr_velo_to_cam entry");
    const auto& v = it->second;
    RigidTransform tr;
    tr.R = {v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]};
    tr.t = {v[3], v[7], v[11]};
    return tr;
  }
};

inline CalibData load_calib(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open calib file: " + path.string());
  CalibData calib;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (!key.empty() && key.back() == ':') key.pop_back();
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    calib.entries[key] = std::move(vals);
  }
  return calib;
}

inline void save_calib(const fs::path& path, const CalibData& calib) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write calib file: " + path.string());
  for (const auto& [key, vals] : calib.entries) {
    out << key << ":";
    char buf[48];
    for (double v : vals) {
      std::snprintf(buf, sizeof buf, " %.12e", v);
      out << buf;
    }
    out << "\n";
  }
}

// ---- label <-> sensor-frame box ----
// The label stores the box bottom center in camera coordinates (x right,
// y down, z forward) with l the extent along the heading. In the sensor frame
// (x forward, y left, z up) the center sits half a height above the bottom and
// the heading angle flips sign and shifts a quarter turn.

inline Box3D label_to_box(const ObjectLabel& lab, const RigidTransform& velo_to_cam) {
  RigidTransform cam_to_velo = velo_to_cam.inverse();
  Vec3 bottom = cam_to_velo.apply({lab.x, lab.y, lab.z});
  Box3D box;
  box.cx = bottom.x;
  box.cy = bottom.y;
  box.cz = bottom.z + lab.h / 2.0;
  box.w = lab.w;
  box.l = lab.l;
  box.h = lab.h;
  box.yaw = wrap_angle(-lab.ry - kPi / 2.0);
  return box;
}

inline ObjectLabel box_to_label(const Box3D& box, const RigidTransform& velo_to_cam,
                                int frame, int track_id, const std::string& type) {
  ObjectLabel lab;
  lab.frame = frame;
  lab.track_id = track_id;
  lab.type = type;
  lab.h = box.h;
  lab.w = box.w;
  lab.l = box.l;
  Vec3 bottom_velo = {box.cx, box.cy, box.cz - box.h / 2.0};
  Vec3 bottom_cam = velo_to_cam.apply(bottom_velo);
  lab.x = bottom_cam.x;
  lab.y = bottom_cam.y;
  lab.z = bottom_cam.z;
  lab.ry = wrap_angle(-box.yaw - kPi / 2.0);
  lab.alpha = lab.ry;  // placeholder observation angle; unused downstream
  return lab;
}

// ---- tracklets: maximal consecutive-frame runs of one track id ----

struct Tracklet {
  int track_id = 0;
  std::string type;
  int start_frame = 0;
  std::vector<Box3D> boxes;  // boxes[i] belongs to frame start_frame + i

  size_t length() const { return boxes.size(); }
};

inline std::vector<Tracklet> extract_tracklets(const std::vector<ObjectLabel>& labels,
                                               const RigidTransform& velo_to_cam,
                                               size_t min_length = 2) {
  std::vector<ObjectLabel> sorted = labels;
  std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return a.track_id != b.track_id ? a.track_id < b.track_id : a.frame < b.frame;
  });
  std::vector<Tracklet> out;
  Tracklet cur;
  int last_frame = 0;
  bool open = false;
  auto flush = [&] {
    if (open && cur.length() >= min_length) out.push_back(cur);
    cur = Tracklet{};
    open = false;
  };
  for (const auto& lab : sorted) {
    if (open && (lab.track_id != cur.track_id || lab.frame != last_frame + 1)) flush();
    if (!open) {
      cur.track_id = lab.track_id;
      cur.type = lab.type;
      cur.start_frame = lab.frame;
      open = true;
    }
    cur.boxes.push_back(label_to_box(lab, velo_to_cam));
    last_frame = lab.frame;
  }
  flush();
  return out;
}

// ---- dataset directory layout ----
//   root/velodyne/<seq>/<frame %06d>.bin
//   root/label_02/<seq>.txt
//   root/calib/<seq>.txt

inline std::string frame_name(int frame) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", frame);
  return buf;
}

inline fs::path scan_path(const fs::path& root, const std::string& seq, int frame) {
  return root / "velodyne" / seq / (frame_name(frame) + ".bin");
}
inline fs::path label_path(const fs::path& root, const std::string& seq) {
  return root / "label_02" / (seq + ".txt");
}
inline fs::path calib_path(const fs::path& root, const std::string& seq) {
  return root / "calib" / (seq + ".txt");
}

struct SequenceData {
  std::string id;
  std::vector<PointCloud> clouds;
  std::vector<ObjectLabel> labels;
  RigidTransform velo_to_cam;
  std::vector<Tracklet> tracklets;
};

inline std::vector<std::string> list_sequences(const fs::path& root) {
  std::vector<std::string> out;
  fs::path dir = root / "velodyne";
  if (!fs::is_directory(dir)) throw IoError("no velodyne directory under " + root.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline SequenceData load_sequence(const fs::path& root, const std::string& seq,
                                  size_t min_tracklet_length = 2) {
  SequenceData data;
  data.id = seq;
  data.velo_to_cam = load_calib(calib_path(root, seq)).velo_to_cam();
  data.labels = load_labels(label_path(root, seq));
  data.tracklets = extract_tracklets(data.labels, data.velo_to_cam, min_tracklet_length);
  for (int frame = 0;; ++frame) {
    fs::path p = scan_path(root, seq, frame);
    if (!fs::exists(p)) break;
    data.clouds.push_back(load_velodyne(p));
  }
  if (data.clouds.empty()) throw IoError("sequence has no scan files: " + seq);
  return data;
}

}  // namespace p2p::data
