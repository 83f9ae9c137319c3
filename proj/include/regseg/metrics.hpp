#pragma once

#include <array>
#include <vector>

#include "regseg/tensor.hpp"

namespace regseg::metrics {

// Binary masks are LabelMaps with nonzero = foreground.

// Voxel centers (z,y,x) of foreground voxels with a 6-neighbor background
// voxel or lying on the volume border, in lexicographic order.
struct SurfacePointSet {
    std::vector<std::array<int, 3>> points;
};

// 2|A∩B| / (|A|+|B|); both empty -> 1 with a warning flag, one empty -> 0.
struct DscResult {
    double value = 0;
    bool both_empty = false;
    bool one_empty = false;
};
DscResult dsc(const LabelMap& a, const LabelMap& b);

SurfacePointSet extract_surface(const LabelMap& mask);

// Symmetric mean / percentile-max surface distances in mm (unit spacing).
double msd(const LabelMap& a, const LabelMap& b);
double hd(const LabelMap& a, const LabelMap& b, int percentile = 100);

LabelMap largest_cc(const LabelMap& mask);

// Exact squared Euclidean distance transform of the given seed points over
// the volume (Felzenszwalb/Huttenlocher, separable). Exposed for tests.
Tensor<double> squared_edt(const std::vector<int>& shape,
                           const std::vector<std::array<int, 3>>& seeds);

// Per-organ metric row; distances are invalid when either mask is empty.
struct OrganMetrics {
    double dsc = 0;
    double msd_mm = 0;
    double hd_mm = 0;
    double hd95_mm = 0;
    bool failed = false;  // empty prediction or reference: distances undefined
};

OrganMetrics evaluate_masks(const LabelMap& reference, const LabelMap& predicted);

}  // namespace regseg::metrics
