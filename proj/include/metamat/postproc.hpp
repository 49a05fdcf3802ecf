#pragma once

#include "metamat/fields.hpp"
#include "metamat/grf.hpp"

namespace metamat {

// Recovers a binary design from the vertical displacement of a sampled
// sequence. A pixel of the upper-left quarter is void iff |u2| stays within
// tolerance_fraction of the sample-wide u2 range in every frame; the quarter
// is then mirrored to the full cell and disconnected material is dropped.
// All components tied for the largest size are kept, which preserves the
// mirror symmetry that a single-winner rule could break.
UnitCell extract_topology(const FieldSequence& seq, double tolerance_fraction = 0.02);

// All-pixel average of sigma22 per frame with predictions on void pixels
// forced to zero first, so spurious stress outside the cell cannot leak into
// the effective curve.
StressStrainCurve predict_curve(const FieldSequence& seq, const BinaryGrid& cell);

// sigma22 rendered on the deformed configuration, [F, H, W]: each advected
// pixel lands at (i - u2, j + u1) by nearest-pixel splatting (row index grows
// downward while u2 is up-positive); out-of-frame pixels are clipped and
// collisions averaged. Visualization only. When a cell is given, only its
// material pixels are advected.
Tensor to_eulerian(const FieldSequence& seq, const BinaryGrid* cell = nullptr);

}  // namespace metamat
