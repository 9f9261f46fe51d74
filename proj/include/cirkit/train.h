#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cirkit/instructgen.h"
#include "cirkit/model.h"

namespace cirkit {

struct LossConfig {
    double tau_init = 0.07;
    bool use_query_negatives = true;
    double tau_min = 1e-3;
};

// N embedding triples. r_query_neg holds encode_target(query image), the
// query-image hard negatives.
struct TrainBatch {
    int n = 0;
    int dim = 0;
    std::vector<double> r_q;          // n x dim
    std::vector<double> r_t;          // n x dim
    std::vector<double> r_query_neg;  // n x dim

    const double* q(int i) const { return r_q.data() + static_cast<size_t>(i) * dim; }
    const double* t(int i) const { return r_t.data() + static_cast<size_t>(i) * dim; }
    const double* qn(int i) const { return r_query_neg.data() + static_cast<size_t>(i) * dim; }

    void validate(const LossConfig& config) const;
};

struct LossResult {
    double loss = 0.0;  // mean over examples
    std::vector<double> per_example;
    std::vector<double> positive_sim;
    std::vector<int> denominator_terms;  // 2N with query negatives, N without
    // gradients of the mean loss
    std::vector<double> d_r_q, d_r_t, d_r_query_neg;
    double d_tau = 0.0;
};

// L_i = -log( e^{sim(q_i,t_i)/tau} / sum_j (e^{sim(q_i,t_j)/tau} + e^{sim(q_i,t'_j)/tau}) )
// with the t'_j terms dropped when use_query_negatives is false. All inputs
// unit-norm so sim is the dot product; log-sum-exp stabilized.
LossResult contrastive_loss(const TrainBatch& batch, double tau, const LossConfig& config);

struct GradCheckEntry {
    size_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<GradCheckEntry> entries;
};

// Central finite differences on num_coords randomly chosen coordinates of
// `params`, against the provided analytic gradient. eval_loss must read the
// live params storage.
GradCheckReport grad_check(const std::function<double()>& eval_loss, std::vector<double>& params,
                           const std::vector<double>& analytic_grad, int num_coords, double eps, uint64_t seed);
// Same, restricted to an explicit coordinate set.
GradCheckReport grad_check_coords(const std::function<double()>& eval_loss, std::vector<double>& params,
                                  const std::vector<double>& analytic_grad, const std::vector<size_t>& coords,
                                  double eps);

struct OptimizerConfig {
    std::string kind = "adam";  // "adam" | "sgd"
    double lr_new = 2e-5;
    double lr_backbone = 2e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam (default) or plain SGD over the flat parameter vector, with the two
// learning-rate groups and optional backbone freezing.
class Optimizer {
public:
    Optimizer(const ParamStore& store, OptimizerConfig config);
    void step(ParamStore& store, const std::vector<double>& grad, bool freeze_backbone);

private:
    OptimizerConfig config_;
    std::vector<uint8_t> is_backbone_;  // per coordinate
    std::vector<double> m_, v_;
    long t_ = 0;
};

struct TrainConfig {
    int batch_size = 64;
    int max_steps = 1000;
    double lr_new = 2e-5;
    double lr_backbone = 2e-6;
    uint64_t seed = 42;
    int eval_every = 100;   // validation cadence in steps
    int patience = 5;       // evals without improvement before stopping
    double val_fraction = 0.1;
    std::string optimizer = "adam";
    double tau_init = 0.07;
    double tau_min = 1e-3;
    bool no_query_negatives = false;
    bool crossattn = false;
    bool frozen_backbone = false;
    bool one_per_page = false;  // at most one triplet per page per batch

    void validate() const;
};

struct TrainResult {
    int steps_run = 0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double best_val_r1 = 0.0;
    int best_step = 0;
    bool aborted_non_finite = false;
    std::string metrics_csv;  // step,train_loss,tau,val_R@1,wall_ms
};

// Trains in place. Validation R@1 is measured on a held-out split of the
// triplets against an index of that split's target images; the best
// checkpoint by validation score is written to best_checkpoint_path (when
// nonempty), the metrics CSV to metrics_csv_path (when nonempty).
TrainResult train(FusionModel& model, const std::vector<Triplet>& triplets,
                  const std::unordered_map<std::string, const ImageRecord*>& records, const TrainConfig& config,
                  const std::string& metrics_csv_path = "", const std::string& best_checkpoint_path = "");

}  // namespace cirkit
