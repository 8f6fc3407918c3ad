#pragma once

// Trajectory text format, one pose per line:
//   id timestamp tx ty tz qw qx qy qz
// Whitespace separated; '#' starts a comment. Files written here carry a
// "# biloop-trajectory v1" header; headerless files from other tools are
// accepted.

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "biloop/geometry.hpp"
#include "biloop/io_util.hpp"

namespace biloop {

inline constexpr int kTrajectoryVersion = 1;

inline std::vector<CameraPose> read_trajectory(std::istream& is) {
  std::vector<CameraPose> poses;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1) {
      if (auto v = io::parse_header(line, "trajectory")) {
        io::check_version(*v, kTrajectoryVersion, "trajectory");
        continue;
      }
    }
    const auto body = io::strip_comment(line);
    if (body.empty()) continue;
    std::istringstream ls{std::string(body)};
    SampleId id;
    double ts, tx, ty, tz, qw, qx, qy, qz;
    if (!(ls >> id >> ts >> tx >> ty >> tz >> qw >> qx >> qy >> qz)) {
      fail(ErrorCategory::Format, "trajectory line " + std::to_string(lineno) +
                                      ": expected 'id timestamp tx ty tz qw qx qy qz'");
    }
    poses.push_back(CameraPose::make(Quat(qw, qx, qy, qz), Vec3(tx, ty, tz), id, ts));
  }
  return poses;
}

inline std::vector<CameraPose> read_trajectory(const std::filesystem::path& path) {
  auto f = io::open_in(path);
  return read_trajectory(f);
}

inline void write_trajectory(std::ostream& os, const std::vector<CameraPose>& poses) {
  io::write_header(os, "trajectory", kTrajectoryVersion);
  os << "# id timestamp tx ty tz qw qx qy qz\n";
  for (const auto& p : poses) {
    os << p.id << ' ' << p.timestamp.value_or(0.0) << ' ' << p.t.x() << ' ' << p.t.y() << ' '
       << p.t.z() << ' ' << p.q.w() << ' ' << p.q.x() << ' ' << p.q.y() << ' ' << p.q.z()
       << '\n';
  }
}

inline void write_trajectory(const std::filesystem::path& path,
                             const std::vector<CameraPose>& poses) {
  auto f = io::open_out(path);
  write_trajectory(f, poses);
}

}  // namespace biloop
