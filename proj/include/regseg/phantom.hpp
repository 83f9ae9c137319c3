#pragma once

#include <cstdint>
#include <string>

#include "regseg/dvf.hpp"
#include "regseg/tensor.hpp"

namespace regseg::phantom {

// Label scheme: 0 air, 1 prostate, 2 seminal vesicles, 3 bladder, 4 rectum,
// 5 torso soft tissue. Labels 1..4 are the scored structures; 5 collapses to
// background for segmentation training.
enum Label : uint8_t {
    kAir = 0,
    kProstate = 1,
    kSeminalVesicles = 2,
    kBladder = 3,
    kRectum = 4,
    kTorso = 5,
};
constexpr int kNumOrgans = 4;  // labels 1..4

inline const char* organ_name(int label) {
    switch (label) {
        case kProstate: return "prostate";
        case kSeminalVesicles: return "seminal_vesicles";
        case kBladder: return "bladder";
        case kRectum: return "rectum";
    }
    return "?";
}

struct HuTable {
    float air = -1000, torso = 0, bladder = 10, prostate = 45;
    float seminal_vesicles = 40, rectum = 35, gas = -1000;
};

struct PhantomSpec {
    uint64_t seed = 0;
    int extent = 96;               // cubic volume edge, >= 44 and divisible by 4
    double noise_sigma = 15;       // HU noise inside the torso
    double bias_amplitude = 20;    // smooth intensity bias inside the torso
    double deform_magnitude = 1.5; // RMS of each displacement channel, voxels
    double deform_sigma = 8;       // Gaussian smoothing of the random field
    double bladder_scale_min = 0.85, bladder_scale_max = 1.45;
    double gas_prob = 0.3;         // chance of a rectal gas pocket per scan
    HuTable hu;

    void validate() const;
};

struct Case {
    Tensor<float> volume;  // [n,n,n], HU in [-1000, 1000]
    LabelMap labels;       // [n,n,n]
};

Case gen_planning(const PhantomSpec& spec);

struct DailyCase {
    Case scan;
    Tensor<float> dvf_gt;  // [3,n,n,n], (dz,dy,dx) voxels; daily samples
                           // planning at x + u(x)
    double bladder_scale = 1;
};

// `bladder_scale` <= 0 draws from [bladder_scale_min, bladder_scale_max].
DailyCase gen_daily(const Case& planning, const PhantomSpec& spec, uint64_t fraction_salt,
                    double bladder_scale = 0);

// Writes `case_<p>_<f>/` directories (planning, daily, ground-truth DVF,
// manifest) plus split.json; returns the combined manifest hash.
uint64_t make_dataset(const std::string& out_dir, int n_patients, int fractions_per_patient,
                      const PhantomSpec& spec);

// Separable Gaussian blur, truncated at 3 sigma. Exposed for tests.
Tensor<float> gaussian_blur3(const Tensor<float>& vol, double sigma);

}  // namespace regseg::phantom
