#pragma once

#include <vector>

namespace bat {

// Axis-aligned rectangle on the half-resolution feature grid. (x, y) is the
// upper-left corner with x indexing rows, matching the entropy-map layout.
struct Window {
    int x = 0;
    int y = 0;
    int h = 0;
    int w = 0;

    bool operator==(const Window& o) const { return x == o.x && y == o.y && h == o.h && w == o.w; }
};

double window_iou(const Window& a, const Window& b);

// Dense tiling at the given stride, plus edge-flushed rows/columns so the
// full extent is covered.
std::vector<Window> tile_windows(int grid_h, int grid_w, int win_h, int win_w, int stride);

// Mean entropy over the half-resolution block anchored at (x/2, y/2) with
// size (h/2, w/2); blocks are clamped to the map edge, and *clamped is set
// when clamping occurred.
std::vector<double> score_windows(const std::vector<Window>& windows,
                                  const std::vector<double>& entropy, int ent_h, int ent_w,
                                  bool* clamped = nullptr);

// Greedy non-maximum suppression. Returns indices into `windows` in selection
// order (scores non-increasing); ties break on (x, y, h, w). Keeps at most
// k_max windows and suppresses any window whose IoU with a kept one exceeds
// iou_threshold.
std::vector<int> nms(const std::vector<Window>& windows, const std::vector<double>& scores,
                     double iou_threshold, int k_max);

// Nearest-neighbor label downsampling by an integer factor.
std::vector<int> nearest_downsample_labels(const std::vector<int>& labels, int h, int w, int factor);

// Fraction of boundary pixels (4-neighbor class change) covered by at least
// one window. A mask without boundary pixels yields 1.0 and sets *no_boundary.
double boundary_coverage(const std::vector<Window>& windows, const std::vector<int>& labels,
                         int grid_h, int grid_w, bool* no_boundary = nullptr);

}  // namespace bat
