#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "regseg/dvf.hpp"
#include "regseg/metrics.hpp"
#include "regseg/network.hpp"
#include "regseg/phantom.hpp"
#include "regseg/weighting.hpp"

namespace regseg::train {

struct TrainConfig {
    ArchKind arch = ArchKind::cross_stitch;
    weighting::Strategy strategy = weighting::Strategy::equal;
    double bending_weight = 0.5;
    int patch = 96;  // desk preset 48
    int iterations = 1000;
    double lr = 1e-4;  // fixed, no schedule
    bool radam = false;
    uint64_t seed = 0;
    int log_interval = 10;
    bool deterministic = true;
    int num_classes = 5;      // background + 4 structures
    double grad_clip = 10.0;  // global-norm cap, 0 disables
    double dwa_tmp = 1.0;
    int dwa_ma_window = 0;

    void validate() const;
};

// Maps raw phantom labels (air/organs/torso) onto segmentation classes:
// air and torso collapse to background, organs keep ids 1..4.
const std::vector<int>& seg_class_remap();

// One (planning, daily) fraction, intensities normalized to [-1,1].
struct CasePair {
    std::string name;
    Tensor<float> planning, daily;  // [N,N,N]
    LabelMap planning_labels, daily_labels;
    Tensor<float> dvf_gt;  // [3,N,N,N], may be empty
    // Sampling-class voxel indices in the daily labels:
    // 0 targets (prostate+SV), 1 OARs (bladder+rectum), 2 torso.
    std::array<std::vector<long long>, 3> group_voxels;
};

struct Dataset {
    std::vector<CasePair> train_cases, val_cases;
};

// Reads a make_dataset tree (case_* directories plus split.json).
Dataset load_dataset(const std::string& dir);

// Builds a CasePair from in-memory phantoms (normalization + voxel indexing).
CasePair make_case_pair(std::string name, const phantom::Case& planning,
                        const phantom::DailyCase& daily);

struct PatchPair {
    Tensor<float> fixed, moving;  // [n,n,n]
    LabelMap fixed_labels, moving_labels;
    std::array<int, 3> origin{0, 0, 0};
    int class_group = -1;
};

// Per-term loss values of one optimization step (both swap directions summed)
// plus the weights in effect.
struct StepRecord {
    long long iter = 0;
    double l_ncc = 0, l_dscr = 0, l_dscs = 0, l_be = 0, total = 0;
    double w0 = 1, w1 = 1, w2 = 1, w3 = 0.5;
    double seconds = 0;
    bool clipped = false;
};

class Trainer {
public:
    TrainConfig cfg;
    Network<float> net;
    weighting::HomoscedasticState<float> homo;
    weighting::DwaState dwa;
    std::map<std::string, Tensor<float>> opt_m, opt_v;
    long long iteration = 0;
    Rng rng;
    long long resamples = 0;  // empty-class redraws during patch sampling
    long long clips = 0;      // gradient-clip activations

    explicit Trainer(const TrainConfig& cfg);

    // Tasks the architecture contributes to the adaptive weighting (subset of
    // {ncc, dsc_r, dsc_s} in that order).
    int num_tasks() const;

    // Draws a class-balanced patch from a uniformly chosen training case.
    PatchPair sample_patch(const Dataset& ds);
    PatchPair sample_patch(const CasePair& cp);

    // One iteration: joint loss in both directions on one tape, one update.
    StepRecord train_step(const PatchPair& pair);

    // Gradients of a single direction without updating; for the doubling
    // equivalence test. `swapped` exchanges the fixed/moving roles.
    std::map<std::string, Tensor<float>> direction_grads(const PatchPair& pair, bool swapped,
                                                         StepRecord* rec = nullptr);

    // Clips (global norm) and applies one Adam/RAdam update at `iteration+1`,
    // then advances the iteration counter.
    void apply_update(std::map<std::string, Tensor<float>>& grads);

    void save_checkpoint(const std::string& base) const;
    static Trainer load_checkpoint(const std::string& base, const TrainConfig& cfg);

    // Effective (w0..w3) used for the next step under the current strategy.
    std::array<double, 4> current_weights() const;

private:
    Tensor<float>& param_by_name(const std::string& name);
};

// Per-organ metrics for both output paths of one evaluated case.
struct CaseReport {
    bool has_seg = false, has_reg = false;
    std::array<metrics::OrganMetrics, phantom::kNumOrgans> seg{}, reg{};
    dvf::DvfStats stats{};
    LabelMap seg_pred, reg_pred;  // postprocessed full-volume predictions
    Tensor<float> dvf_full;       // assembled fine-resolution field [3,N,N,N]
};

// Tiled sliding-window inference (window `patch`, fine-output stitching),
// softmax/argmax/largest-component postprocessing on the segmentation path,
// nearest-label warping on the registration path. `override_dvf` replaces the
// network's field (ground-truth or zero-field sanity modes).
CaseReport evaluate_case(Network<float>& net, const CasePair& cp, int patch,
                         const Tensor<float>* override_dvf = nullptr);

struct RunPaths {
    std::string log_csv;      // iter,l_ncc,l_dscr,l_dscs,l_be,total,w0..w3,seconds
    std::string weights_csv;  // iter,strategy,w_ncc,w_dscr,w_dscs,w_be[,eta*/r*]
    std::string ckpt_base;    // final checkpoint; "<base>_dump" on NaN abort
};

// Runs `iterations` steps with periodic logging; saves the final checkpoint.
// On a NumericsError the state is dumped to "<ckpt_base>_dump" and the error
// rethrown.
std::vector<StepRecord> run_training(Trainer& tr, const Dataset& ds, int iterations,
                                     const RunPaths& paths);

}  // namespace regseg::train
