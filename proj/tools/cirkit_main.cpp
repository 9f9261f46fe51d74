// cirkit command-line front end: mine | instruct | train | eval | synth |
// experiment | plot. A JSON config file supplies defaults; dotted flags
// override it; CIRKIT_SEED overrides the default run seed.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cirkit/annotate.h"
#include "cirkit/corpus.h"
#include "cirkit/evalkit.h"
#include "cirkit/instructgen.h"
#include "cirkit/kernels.h"
#include "cirkit/mining.h"
#include "cirkit/model.h"
#include "cirkit/plot.h"
#include "cirkit/synth.h"
#include "cirkit/train.h"
#include "cirkit/util.h"

using namespace cirkit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

uint64_t default_seed() {
    const char* env = std::getenv("CIRKIT_SEED");
    if (env && *env) return std::strtoull(env, nullptr, 10);
    return 42;
}

// config-file values become option defaults; explicit flags still win
void apply_config_defaults(CLI::App& app, const json& cfg, const std::string& prefix = "") {
    for (auto it = cfg.begin(); it != cfg.end(); ++it) {
        std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it.value().is_object()) {
            apply_config_defaults(app, it.value(), key);
            continue;
        }
        CLI::Option* opt = app.get_option_no_throw("--" + key);
        if (!opt) continue;
        std::string value =
            it.value().is_string() ? it.value().get<std::string>() : it.value().dump();
        opt->default_val(value);
    }
}

std::string find_config_path(int argc, char** argv) {
    for (int i = 1; i + 1 < argc; ++i) {
        if (std::string(argv[i]) == "--config") return argv[i + 1];
    }
    return "";
}

struct FilterFlags {
    FilterConfig cfg;
    void attach(CLI::App* cmd) {
        cmd->add_option("--filter.dup_image_sim", cfg.dup_image_sim, "near-duplicate cosine threshold")
            ->capture_default_str();
        cmd->add_option("--filter.group_overlap_ratio", cfg.group_overlap_ratio,
                        "member-overlap ratio above which one group is removed")
            ->capture_default_str();
        cmd->add_option("--filter.min_resolution", cfg.min_resolution, "minimum pixels per side (pixel mode)")
            ->capture_default_str();
        cmd->add_option("--filter.img_img_min", cfg.img_img_min, "image-image similarity threshold")
            ->capture_default_str();
        cmd->add_option("--filter.txt_txt_min", cfg.txt_txt_min, "caption-caption similarity threshold")
            ->capture_default_str();
        cmd->add_option("--filter.ica_self_min", cfg.ica_self_min, "label-to-target similarity floor")
            ->capture_default_str();
        cmd->add_option("--filter.ica_query_max", cfg.ica_query_max, "label-to-query similarity ceiling")
            ->capture_default_str();
        cmd->add_option("--filter.max_pairs_per_group", cfg.max_pairs_per_group, "pair cap per page")
            ->capture_default_str();
        cmd->add_option("--filter.combine_rule", cfg.combine_rule, "relevance combination: or | and")
            ->capture_default_str();
    }
};

struct ModelFlags {
    int dim = 64;
    int layers = 4;
    int heads = 4;
    int ff_width = 0;
    int feature_dim = 32;
    int image_size = 16;
    int vocab_size = 512;
    int max_tokens = 32;
    std::string mode = "synthetic";
    std::string arch = "self_attention";

    void attach(CLI::App* cmd) {
        cmd->add_option("--model.dim", dim, "embedding width")->capture_default_str();
        cmd->add_option("--model.layers", layers, "fusion self-attention layers")->capture_default_str();
        cmd->add_option("--model.heads", heads, "attention heads")->capture_default_str();
        cmd->add_option("--model.ff_width", ff_width, "feed-forward width (0 = 4*dim)")->capture_default_str();
        cmd->add_option("--model.feature_dim", feature_dim, "synthetic feature width")->capture_default_str();
        cmd->add_option("--model.image_size", image_size, "pixel resample size")->capture_default_str();
        cmd->add_option("--model.vocab_size", vocab_size, "tokenizer hash buckets")->capture_default_str();
        cmd->add_option("--model.max_tokens", max_tokens, "token cap per text")->capture_default_str();
        cmd->add_option("--model.mode", mode, "corpus mode: synthetic | pixel")->capture_default_str();
        cmd->add_option("--model.arch", arch, "fusion arch: self_attention | cross_attention")->capture_default_str();
    }

    ModelConfig build() const {
        ModelConfig cfg;
        cfg.dim = dim;
        cfg.layers = layers;
        cfg.heads = heads;
        cfg.ff_width = ff_width;
        cfg.feature_dim = feature_dim;
        cfg.image_size = image_size;
        cfg.vocab_size = vocab_size;
        cfg.max_tokens = max_tokens;
        cfg.mode = corpus_mode_from_string(mode);
        cfg.arch = fusion_arch_from_string(arch);
        return cfg;
    }
};

struct TrainFlags {
    TrainConfig cfg;
    TrainFlags() {
        cfg.lr_new = 1e-3;  // desk-scale Adam default; the paper-scale rates stay available
        cfg.lr_backbone = 1e-4;
        cfg.max_steps = 2000;
        cfg.batch_size = 32;
        cfg.eval_every = 200;
        cfg.patience = 5;
    }
    void attach(CLI::App* cmd) {
        cmd->add_option("--train.batch_size", cfg.batch_size, "triplets per step")->capture_default_str();
        cmd->add_option("--train.max_steps", cfg.max_steps, "maximum optimizer steps")->capture_default_str();
        cmd->add_option("--train.lr_new", cfg.lr_new, "learning rate for new parameters")->capture_default_str();
        cmd->add_option("--train.lr_backbone", cfg.lr_backbone, "learning rate for backbone parameters")
            ->capture_default_str();
        cmd->add_option("--train.eval_every", cfg.eval_every, "validation cadence in steps")->capture_default_str();
        cmd->add_option("--train.patience", cfg.patience, "evals without improvement before stopping")
            ->capture_default_str();
        cmd->add_option("--train.val_fraction", cfg.val_fraction, "held-out validation fraction")
            ->capture_default_str();
        cmd->add_option("--train.optimizer", cfg.optimizer, "adam | sgd")->capture_default_str();
        cmd->add_option("--train.tau_init", cfg.tau_init, "initial temperature")->capture_default_str();
        cmd->add_option("--train.tau_min", cfg.tau_min, "temperature clamp floor")->capture_default_str();
        cmd->add_flag("--train.no_query_negatives", cfg.no_query_negatives,
                      "drop the query-image hard negatives from the loss");
        cmd->add_flag("--train.crossattn", cfg.crossattn, "train the cross-attention variant");
        cmd->add_flag("--train.frozen_backbone", cfg.frozen_backbone, "freeze backbone encoders");
        cmd->add_flag("--train.one_per_page", cfg.one_per_page, "at most one triplet per page per batch");
    }
};

struct SynthFlags {
    SynthConfig cfg;
    void attach(CLI::App* cmd) {
        cmd->add_option("--synth.feature_dim", cfg.feature_dim, "feature-proxy width")->capture_default_str();
        cmd->add_option("--synth.n_attrs", cfg.n_attrs, "planted attribute count")->capture_default_str();
        cmd->add_option("--synth.attr_scale", cfg.attr_scale, "attribute axis magnitude")->capture_default_str();
        cmd->add_option("--synth.noise", cfg.noise, "per-rendering noise")->capture_default_str();
        cmd->add_option("--synth.n_train_pages", cfg.n_train_pages, "training pages")->capture_default_str();
        cmd->add_option("--synth.attrs_per_page", cfg.attrs_per_page, "renderings per page")->capture_default_str();
        cmd->add_option("--synth.n_triplets", cfg.n_triplets, "planted training triplets")->capture_default_str();
        cmd->add_option("--synth.n_index_objects", cfg.n_index_objects, "objects in the eval index")
            ->capture_default_str();
        cmd->add_option("--synth.n_eval_queries", cfg.n_eval_queries, "eval query cases per task")
            ->capture_default_str();
        cmd->add_option("--synth.subset_size", cfg.subset_size, "candidate subset size")->capture_default_str();
    }
};

std::vector<ImageRecord> load_corpus_or_throw(const std::string& path, CorpusMode mode) {
    IngestResult res = ingest_corpus(path, mode);
    for (const IngestError& err : res.errors) {
        std::fprintf(stderr, "corpus line %zu: %s\n", err.line, err.message.c_str());
    }
    if (res.records.empty()) throw std::runtime_error("no valid records in " + path);
    return res.records;
}

std::unique_ptr<Annotator> make_annotator(const std::string& annotations_path) {
    if (annotations_path.empty()) return std::make_unique<MockAnnotator>();
    return std::make_unique<FileAnnotator>(annotations_path);
}

std::unique_ptr<TextGenClient> make_client(const std::string& kind, const std::string& replay_file,
                                           const std::string& command) {
    if (kind == "mock") return std::make_unique<MockTextGenClient>();
    if (kind == "file-replay") {
        if (replay_file.empty()) throw std::runtime_error("--replay-file is required for the file-replay client");
        return std::make_unique<FileReplayClient>(replay_file);
    }
    if (kind == "external-command") {
        if (command.empty()) throw std::runtime_error("--command is required for the external-command client");
        return std::make_unique<ExternalCommandClient>(command);
    }
    throw std::runtime_error("unknown client: " + kind + " (mock | file-replay | external-command)");
}

// ---------------------------------------------------------------------------
// experiment helpers
// ---------------------------------------------------------------------------

struct BenchScores {
    double r1 = 0.0;
    double self_rate = 0.0;
};

BenchScores eval_on_world(const FusionModel& model, const SynthWorld& world, bool with_self_rate) {
    BenchScores out;
    out.r1 = run_task(TaskKind::cir, world.cir, model).metrics.at("R@1");
    if (with_self_rate) {
        // self-retrieval is measured with the query images inserted into the pool
        std::vector<const ImageRecord*> items;
        for (const ImageRecord& rec : world.cir.items) items.push_back(&rec);
        for (const ImageRecord& rec : world.cir.queries) items.push_back(&rec);
        RetrievalIndex index = build_index(items, model);
        std::unordered_map<std::string, const ImageRecord*> records;
        for (const ImageRecord* rec : items) records.emplace(rec->image_id, rec);
        out.self_rate = self_retrieval_rate(index, world.cir.cases, records, model);
    }
    return out;
}

FusionModel train_fresh(const SynthWorld& world, const std::vector<Triplet>& triplets, ModelConfig mc, TrainConfig tc) {
    FusionModel model(mc, tc.seed);
    auto records = build_record_lookup(world.train_records);
    train(model, triplets, records, tc);
    return model;
}

std::vector<Triplet> subsample_triplets(const std::vector<Triplet>& all, size_t n, uint64_t seed) {
    if (n > all.size()) {
        throw std::runtime_error("insufficient triplets: need " + std::to_string(n) + ", have " +
                                 std::to_string(all.size()));
    }
    std::vector<size_t> idx(all.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(hash_combine(seed, fnv1a("subsample")));
    rng.shuffle(idx);
    std::vector<Triplet> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) out.push_back(all[idx[i]]);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"composed image retrieval research pipeline"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file; dotted flags override its values");

    uint64_t seed = default_seed();

    // ---- mine -------------------------------------------------------------
    auto* mine = app.add_subcommand("mine", "mine candidate pairs from a corpus");
    std::string mine_corpus, mine_mode = "synthetic", mine_annotations, mine_aliases;
    std::string mine_out_pairs = "pairs.jsonl", mine_out_stats = "mine_stats.json";
    int mine_backend_dim = 64;
    FilterFlags mine_filter;
    mine->add_option("--corpus", mine_corpus, "corpus JSONL")->required();
    mine->add_option("--mode", mine_mode, "pixel | synthetic")->capture_default_str();
    mine->add_option("--annotations", mine_annotations, "sidecar annotations JSONL (default: mock annotator)");
    mine->add_option("--aliases", mine_aliases, "token-to-axis alias JSON for the mock scoring backend");
    mine->add_option("--backend-dim", mine_backend_dim, "mock scoring backend dimension")->capture_default_str();
    mine->add_option("--out-pairs", mine_out_pairs, "output pairs JSONL")->capture_default_str();
    mine->add_option("--out-stats", mine_out_stats, "output per-stage stats JSON")->capture_default_str();
    mine->add_option("--seed", seed, "run seed")->capture_default_str();
    mine_filter.attach(mine);

    // ---- instruct ----------------------------------------------------------
    auto* instruct = app.add_subcommand("instruct", "generate instructions for mined pairs");
    std::string ins_pairs, ins_corpus, ins_mode = "synthetic", ins_annotations, ins_out = "triplets.jsonl";
    std::string ins_client = "mock", ins_replay, ins_command, ins_assets = "assets";
    bool ins_template_based = false;
    instruct->add_option("--pairs", ins_pairs, "pairs JSONL from mine")->required();
    instruct->add_option("--corpus", ins_corpus, "corpus JSONL")->required();
    instruct->add_option("--mode", ins_mode, "pixel | synthetic")->capture_default_str();
    instruct->add_option("--annotations", ins_annotations, "sidecar annotations JSONL (default: mock annotator)");
    instruct->add_option("--out", ins_out, "output triplets JSONL")->capture_default_str();
    instruct->add_option("--client", ins_client, "mock | file-replay | external-command")->capture_default_str();
    instruct->add_option("--replay-file", ins_replay, "JSONL of prompt_hash/response for file-replay");
    instruct->add_option("--command", ins_command, "shell command for external-command");
    instruct->add_option("--assets", ins_assets, "prompt assets directory")->capture_default_str();
    instruct->add_flag("--template-based", ins_template_based, "emit template-based instructions");
    instruct->add_option("--seed", seed, "run seed")->capture_default_str();

    // ---- train --------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "train the fusion encoder on triplets");
    std::string tr_corpus, tr_mode = "synthetic", tr_triplets;
    std::string tr_checkpoint = "model.ckpt", tr_metrics = "train_metrics.csv";
    ModelFlags tr_model;
    TrainFlags tr_train;
    train_cmd->add_option("--corpus", tr_corpus, "corpus JSONL")->required();
    train_cmd->add_option("--mode", tr_mode, "pixel | synthetic")->capture_default_str();
    train_cmd->add_option("--triplets", tr_triplets, "triplets JSONL")->required();
    train_cmd->add_option("--checkpoint", tr_checkpoint, "best-validation checkpoint path")->capture_default_str();
    train_cmd->add_option("--metrics-csv", tr_metrics, "per-step metrics CSV")->capture_default_str();
    train_cmd->add_option("--seed", seed, "run seed")->capture_default_str();
    tr_model.attach(train_cmd);
    tr_train.attach(train_cmd);

    // ---- eval ---------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint under a task protocol");
    std::string ev_checkpoint, ev_task = "cir", ev_items, ev_queries, ev_cases, ev_text_items;
    std::string ev_report = "report.json";
    bool ev_synth = false;
    SynthFlags ev_synth_flags;
    eval_cmd->add_option("--checkpoint", ev_checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--task", ev_task, "cir | domain_transfer | sbir | text_to_image | image_to_text")
        ->capture_default_str();
    eval_cmd->add_option("--items", ev_items, "index items corpus JSONL");
    eval_cmd->add_option("--queries", ev_queries, "query images corpus JSONL");
    eval_cmd->add_option("--cases", ev_cases, "query cases JSONL");
    eval_cmd->add_option("--text-items", ev_text_items, "text items JSONL (image_to_text)");
    eval_cmd->add_option("--report", ev_report, "output metrics report JSON")->capture_default_str();
    eval_cmd->add_flag("--synth", ev_synth, "evaluate on the built-in synthetic benchmark");
    eval_cmd->add_option("--seed", seed, "run seed (synthetic benchmark)")->capture_default_str();
    ev_synth_flags.attach(eval_cmd);

    // ---- synth ----------------------------------------------------------------
    auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic benchmark and training data");
    std::string sy_out = "synth_data";
    SynthFlags sy_flags;
    synth_cmd->add_option("--out", sy_out, "output directory")->capture_default_str();
    synth_cmd->add_option("--seed", seed, "generator seed")->capture_default_str();
    sy_flags.attach(synth_cmd);

    // ---- experiment -------------------------------------------------------------
    auto* exp_cmd = app.add_subcommand("experiment", "run a study over training variants");
    std::string exp_name, exp_out = "experiments";
    std::string exp_budgets = "500,2000,10000", exp_seeds = "42,43";
    ModelFlags exp_model;
    TrainFlags exp_train;
    SynthFlags exp_synth;
    exp_cmd
        ->add_option("--name", exp_name,
                     "data_scaling | query_neg_ablation | arch_ablation | instruction_ablation")
        ->required();
    exp_cmd->add_option("--out", exp_out, "output directory")->capture_default_str();
    exp_cmd->add_option("--budgets", exp_budgets, "comma-separated triplet budgets (data_scaling)")
        ->capture_default_str();
    exp_cmd->add_option("--seeds", exp_seeds, "comma-separated run seeds")->capture_default_str();
    exp_cmd->add_option("--seed", seed, "world seed")->capture_default_str();
    exp_model.attach(exp_cmd);
    exp_train.attach(exp_cmd);
    exp_synth.attach(exp_cmd);

    // ---- plot -----------------------------------------------------------------
    auto* plot_cmd = app.add_subcommand("plot", "render an SVG line chart from a CSV");
    std::string pl_csv, pl_x, pl_y, pl_out = "plot.svg", pl_title = "";
    bool pl_logx = false;
    plot_cmd->add_option("--csv", pl_csv, "input CSV with a header row")->required();
    plot_cmd->add_option("--x", pl_x, "x column name")->required();
    plot_cmd->add_option("--y", pl_y, "comma-separated y column names")->required();
    plot_cmd->add_option("--out", pl_out, "output SVG path")->capture_default_str();
    plot_cmd->add_option("--title", pl_title, "chart title")->capture_default_str();
    plot_cmd->add_flag("--log-x", pl_logx, "log-scale x axis");

    // config file defaults, then flags
    std::string pre_config = find_config_path(argc, argv);
    if (!pre_config.empty()) {
        json cfg = json::parse(read_file(pre_config));
        apply_config_defaults(app, cfg);
        for (CLI::App* sub : app.get_subcommands({})) apply_config_defaults(*sub, cfg);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        if (*mine) {
            CorpusMode mode = corpus_mode_from_string(mine_mode);
            mine_filter.cfg.validate();
            std::vector<ImageRecord> records = load_corpus_or_throw(mine_corpus, mode);
            std::unique_ptr<Annotator> annotator = make_annotator(mine_annotations);
            std::vector<AnnotatedRecord> annotated = expand_metadata(records, *annotator);
            std::unordered_map<std::string, int> aliases;
            if (!mine_aliases.empty()) aliases = read_aliases_json(mine_aliases);
            MockScoringBackend backend(mine_backend_dim, 0, aliases);
            MiningResult result = mine_pairs(records, annotated, mine_filter.cfg, backend, mode, seed);
            write_pairs_jsonl(result.pairs, mine_out_pairs);
            atomic_write_file(mine_out_stats, mining_stats_to_json(result.stats));
            std::printf("mined %zu pairs (%zu scored, %zu rejected, %zu capped) -> %s\n", result.stats.pairs_final,
                        result.stats.pairs_scored, result.stats.pairs_rejected_filter, result.stats.pairs_removed_cap,
                        mine_out_pairs.c_str());
        } else if (*instruct) {
            CorpusMode mode = corpus_mode_from_string(ins_mode);
            std::vector<ImageRecord> records = load_corpus_or_throw(ins_corpus, mode);
            std::unique_ptr<Annotator> annotator = make_annotator(ins_annotations);
            std::vector<AnnotatedRecord> annotated = expand_metadata(records, *annotator);
            AnnotatedLookup lookup = build_annotated_lookup(annotated);
            std::vector<CandidatePair> pairs = read_pairs_jsonl(ins_pairs);
            PromptAssets assets = PromptAssets::load(ins_assets);
            std::unique_ptr<TextGenClient> client = make_client(ins_client, ins_replay, ins_command);
            GenStats stats;
            std::vector<Triplet> triplets =
                ins_template_based ? generate_template_based(pairs, lookup, *client, assets, seed, &stats)
                                   : generate_template_free(pairs, lookup, *client, assets, seed, &stats);
            write_triplets_jsonl(triplets, ins_out);
            std::printf("generated %zu triplets (%zu client failures, %zu parse failures) -> %s\n", stats.generated,
                        stats.client_failures, stats.parse_failures, ins_out.c_str());
        } else if (*train_cmd) {
            CorpusMode mode = corpus_mode_from_string(tr_mode);
            std::vector<ImageRecord> records = load_corpus_or_throw(tr_corpus, mode);
            std::vector<Triplet> triplets = read_triplets_jsonl(tr_triplets);
            ModelConfig mc = tr_model.build();
            mc.mode = mode;
            TrainConfig tc = tr_train.cfg;
            tc.seed = seed;
            if (tc.crossattn) mc.arch = FusionArch::cross_attention;
            FusionModel model(mc, seed, tc.tau_init);
            auto lookup = build_record_lookup(records);
            TrainResult res = train(model, triplets, lookup, tc, tr_metrics, tr_checkpoint);
            if (res.aborted_non_finite) {
                std::fprintf(stderr, "training aborted on a non-finite loss; last-good checkpoint kept\n");
                return 1;
            }
            std::printf("trained %d steps, loss %.4f -> %.4f, best val R@1 %.4f (step %d) -> %s\n", res.steps_run,
                        res.initial_loss, res.final_loss, res.best_val_r1, res.best_step, tr_checkpoint.c_str());
        } else if (*eval_cmd) {
            FusionModel model = FusionModel::load_checkpoint(ev_checkpoint);
            TaskKind task = task_kind_from_string(ev_task);
            TaskDataset dataset;
            if (ev_synth) {
                SynthConfig sc = ev_synth_flags.cfg;
                sc.seed = seed;
                SynthWorld world = generate_synth_world(sc);
                switch (task) {
                    case TaskKind::cir: dataset = world.cir; break;
                    case TaskKind::domain_transfer: dataset = world.domain_transfer; break;
                    case TaskKind::sbir: dataset = world.sbir; break;
                    case TaskKind::text_to_image: dataset = world.text_to_image; break;
                    case TaskKind::image_to_text: dataset = world.image_to_text; break;
                }
            } else {
                if (ev_items.empty() || ev_cases.empty()) {
                    throw std::runtime_error("--items and --cases are required without --synth");
                }
                dataset.items = load_corpus_or_throw(ev_items, model.config().mode);
                if (!ev_queries.empty()) dataset.queries = load_corpus_or_throw(ev_queries, model.config().mode);
                dataset.cases = read_cases_jsonl(ev_cases);
                if (!ev_text_items.empty()) {
                    for_each_line(ev_text_items, [&](size_t, const std::string& line) {
                        if (line.empty()) return;
                        json j = json::parse(line);
                        dataset.text_items.emplace_back(j.at("item_id").get<std::string>(),
                                                        j.at("text").get<std::string>());
                    });
                }
            }
            MetricsReport report = run_task(task, dataset, model);
            atomic_write_file(ev_report, metrics_report_to_json(report));
            for (const auto& [name, value] : report.metrics) {
                std::printf("%s = %s\n", name.c_str(), format_double(value).c_str());
            }
            std::printf("report -> %s\n", ev_report.c_str());
        } else if (*synth_cmd) {
            SynthConfig sc = sy_flags.cfg;
            sc.seed = seed;
            SynthWorld world = generate_synth_world(sc);
            fs::create_directories(sy_out);
            auto p = [&](const char* name) { return (fs::path(sy_out) / name).string(); };
            write_corpus_jsonl(world.train_records, CorpusMode::synthetic, p("corpus.jsonl"));
            write_annotations_jsonl(world.annotations, p("annotations.jsonl"));
            write_aliases_json(world.token_axis_aliases, p("aliases.json"));
            write_triplets_jsonl(world.triplets, p("triplets.jsonl"));
            write_corpus_jsonl(world.cir.items, CorpusMode::synthetic, p("index_items.jsonl"));
            write_corpus_jsonl(world.cir.queries, CorpusMode::synthetic, p("cir_queries.jsonl"));
            write_cases_jsonl(world.cir.cases, p("cir_cases.jsonl"));
            write_corpus_jsonl(world.domain_transfer.queries, CorpusMode::synthetic, p("domain_queries.jsonl"));
            write_cases_jsonl(world.domain_transfer.cases, p("domain_cases.jsonl"));
            write_corpus_jsonl(world.sbir.queries, CorpusMode::synthetic, p("sbir_queries.jsonl"));
            write_cases_jsonl(world.sbir.cases, p("sbir_cases.jsonl"));
            std::string text_items;
            for (const auto& [id, text] : world.image_to_text.text_items) {
                json j;
                j["item_id"] = id;
                j["text"] = text;
                text_items += j.dump();
                text_items += '\n';
            }
            atomic_write_file(p("text_items.jsonl"), text_items);
            std::printf("synthetic world -> %s (%zu train records, %zu triplets, %zu index items)\n", sy_out.c_str(),
                        world.train_records.size(), world.triplets.size(), world.cir.items.size());
        } else if (*exp_cmd) {
            fs::create_directories(exp_out);
            auto parse_list = [](const std::string& csv) {
                std::vector<uint64_t> out;
                std::istringstream is(csv);
                std::string tok;
                while (std::getline(is, tok, ',')) out.push_back(std::strtoull(tok.c_str(), nullptr, 10));
                return out;
            };
            std::vector<uint64_t> seeds = parse_list(exp_seeds);
            SynthConfig sc = exp_synth.cfg;
            sc.seed = seed;
            SynthWorld world = generate_synth_world(sc);
            ModelConfig mc = exp_model.build();
            mc.feature_dim = sc.feature_dim;
            TrainConfig tc = exp_train.cfg;
            auto out_path = [&](const std::string& name) { return (fs::path(exp_out) / name).string(); };

            if (exp_name == "data_scaling") {
                std::vector<uint64_t> budgets = parse_list(exp_budgets);
                std::ostringstream csv;
                csv << "budget,seed,R@1\n";
                PlotSeries mean_series{"mean R@1", {}, {}};
                for (uint64_t budget : budgets) {
                    double sum = 0;
                    for (uint64_t s : seeds) {
                        TrainConfig tcs = tc;
                        tcs.seed = s;
                        std::vector<Triplet> subset = subsample_triplets(world.triplets, budget, s);
                        FusionModel model = train_fresh(world, subset, mc, tcs);
                        double r1 = eval_on_world(model, world, false).r1;
                        csv << budget << ',' << s << ',' << format_double(r1) << "\n";
                        sum += r1;
                    }
                    mean_series.x.push_back(static_cast<double>(budget));
                    mean_series.y.push_back(sum / seeds.size());
                }
                atomic_write_file(out_path("data_scaling.csv"), csv.str());
                atomic_write_file(out_path("data_scaling.svg"),
                                  render_line_chart_svg({mean_series}, "retrieval vs training data", "triplets",
                                                        "R@1", true));
                std::printf("data_scaling -> %s\n", out_path("data_scaling.csv").c_str());
            } else if (exp_name == "query_neg_ablation") {
                std::ostringstream csv;
                csv << "seed,variant,R@1,self_retrieval_rate\n";
                PlotSeries with_s{"with query negatives", {}, {}}, without_s{"without", {}, {}};
                for (uint64_t s : seeds) {
                    for (bool no_neg : {false, true}) {
                        TrainConfig tcs = tc;
                        tcs.seed = s;
                        tcs.no_query_negatives = no_neg;
                        FusionModel model = train_fresh(world, world.triplets, mc, tcs);
                        BenchScores scores = eval_on_world(model, world, true);
                        csv << s << ',' << (no_neg ? "without_query_negatives" : "with_query_negatives") << ','
                            << format_double(scores.r1) << ',' << format_double(scores.self_rate) << "\n";
                        (no_neg ? without_s : with_s).x.push_back(static_cast<double>(s));
                        (no_neg ? without_s : with_s).y.push_back(scores.self_rate);
                    }
                }
                atomic_write_file(out_path("query_neg_ablation.csv"), csv.str());
                atomic_write_file(out_path("query_neg_ablation.svg"),
                                  render_line_chart_svg({with_s, without_s}, "self-retrieval rate by variant", "seed",
                                                        "self-retrieval@1", false));
                std::printf("query_neg_ablation -> %s\n", out_path("query_neg_ablation.csv").c_str());
            } else if (exp_name == "arch_ablation") {
                std::ostringstream csv;
                csv << "seed,variant,R@1\n";
                PlotSeries series{"R@1", {}, {}};
                int variant_idx = 0;
                for (const std::string& variant : {"main", "crossattn", "frozen"}) {
                    double sum = 0;
                    for (uint64_t s : seeds) {
                        TrainConfig tcs = tc;
                        tcs.seed = s;
                        ModelConfig mcs = mc;
                        if (variant == "crossattn") {
                            tcs.crossattn = true;
                            mcs.arch = FusionArch::cross_attention;
                        }
                        if (variant == "frozen") tcs.frozen_backbone = true;
                        FusionModel model = train_fresh(world, world.triplets, mcs, tcs);
                        double r1 = eval_on_world(model, world, false).r1;
                        csv << s << ',' << variant << ',' << format_double(r1) << "\n";
                        sum += r1;
                    }
                    series.x.push_back(variant_idx++);
                    series.y.push_back(sum / seeds.size());
                }
                atomic_write_file(out_path("arch_ablation.csv"), csv.str());
                atomic_write_file(out_path("arch_ablation.svg"),
                                  render_line_chart_svg({series}, "architecture variants (0=main 1=crossattn 2=frozen)",
                                                        "variant", "R@1", false));
                std::printf("arch_ablation -> %s\n", out_path("arch_ablation.csv").c_str());
            } else if (exp_name == "instruction_ablation") {
                // template-free vs template-based instructions over the same
                // mined pairs, mock annotator pipeline end to end
                AnnotatedLookup lookup = build_annotated_lookup(world.annotations);
                MockScoringBackend backend(sc.feature_dim, 0, world.token_axis_aliases);
                FilterConfig fc;
                MiningResult mined =
                    mine_pairs(world.train_records, world.annotations, fc, backend, CorpusMode::synthetic, seed);
                PromptAssets assets = PromptAssets::load("assets");
                MockTextGenClient client;
                std::ostringstream csv;
                csv << "seed,provenance,R@1,triplets\n";
                PlotSeries free_s{"template_free", {}, {}}, based_s{"template_based", {}, {}};
                for (uint64_t s : seeds) {
                    for (bool based : {false, true}) {
                        std::vector<Triplet> triplets =
                            based ? generate_template_based(mined.pairs, lookup, client, assets, s)
                                  : generate_template_free(mined.pairs, lookup, client, assets, s);
                        TrainConfig tcs = tc;
                        tcs.seed = s;
                        FusionModel model = train_fresh(world, triplets, mc, tcs);
                        double r1 = eval_on_world(model, world, false).r1;
                        csv << s << ',' << (based ? "template_based" : "template_free") << ',' << format_double(r1)
                            << ',' << triplets.size() << "\n";
                        (based ? based_s : free_s).x.push_back(static_cast<double>(s));
                        (based ? based_s : free_s).y.push_back(r1);
                    }
                }
                atomic_write_file(out_path("instruction_ablation.csv"), csv.str());
                atomic_write_file(out_path("instruction_ablation.svg"),
                                  render_line_chart_svg({free_s, based_s}, "instruction styles", "seed", "R@1", false));
                std::printf("instruction_ablation -> %s\n", out_path("instruction_ablation.csv").c_str());
            } else {
                throw std::runtime_error("unknown experiment: " + exp_name);
            }
        } else if (*plot_cmd) {
            std::vector<std::string> y_cols;
            std::istringstream is(pl_y);
            std::string tok;
            while (std::getline(is, tok, ',')) y_cols.push_back(tok);
            plot_csv(pl_csv, pl_x, y_cols, pl_title.empty() ? pl_csv : pl_title, pl_out, pl_logx);
            std::printf("plot -> %s\n", pl_out.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
