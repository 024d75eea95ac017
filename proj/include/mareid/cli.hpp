#pragma once

// `mareid` command-line entry point.

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "mareid/image.hpp"
#include "mareid/net.hpp"

namespace mareid::cli {

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

// Fixed colours: entries 0..9 for parts (cycled past ten), entry 10 for background.
const std::array<std::array<double, 3>, 11>& palette();
std::array<double, 3> part_color(int part, int num_parts);

// Four tiles side by side (image, keypoints, part colours, overlay) above a
// legend strip with one swatch per part plus background.
Image render_panel(const net::Network& model, const Image& image, int scale = 3);

}  // namespace mareid::cli
