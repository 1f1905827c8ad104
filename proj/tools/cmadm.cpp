// Command-line entry points: corpus generation, training, evaluation,
// ablation grids, lambda sweeps, and attention dumps. All reports are
// line-delimited JSON records. Exit codes: 0 success, 2 usage/input error,
// 3 numerical failure, 4 corrupt artifact.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cma/checkpoint.hpp"
#include "cma/config.hpp"
#include "cma/decode.hpp"
#include "cma/metrics.hpp"
#include "cma/synth_data.hpp"
#include "cma/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitCorrupt = 4;

std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw cma::ContractError("cannot open " + path);
    std::uint64_t h = 0xCBF29CE484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        for (std::streamsize i = 0; i < is.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001B3ULL;
        }
        if (!is) break;
    }
    return h;
}

cma::Dataset load_dataset(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw cma::ContractError("cannot open corpus file " + path);
    return cma::Dataset::build(cma::synth::load_corpus(is));
}

struct TrainOverrides {
    std::optional<double> lambda_xe, lambda_rl;
    std::optional<std::size_t> xe_epochs, scst_epochs, batch_size;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mode, residuals;

    void apply(cma::TrainConfig& cfg) const {
        if (lambda_xe) cfg.lambda_xe = *lambda_xe;
        if (lambda_rl) cfg.lambda_rl = *lambda_rl;
        if (xe_epochs) cfg.xe_epochs = *xe_epochs;
        if (scst_epochs) cfg.scst_epochs = *scst_epochs;
        if (batch_size) cfg.batch_size = *batch_size;
        if (seed) cfg.seed = *seed;
        if (mode) cfg.mode = cma::cma_mode_from(*mode);
        if (residuals) {
            if (*residuals == "none") {
                cfg.residual_visual = cfg.residual_textual = false;
            } else if (*residuals == "visual") {
                cfg.residual_visual = true;
                cfg.residual_textual = false;
            } else if (*residuals == "textual") {
                cfg.residual_visual = false;
                cfg.residual_textual = true;
            } else if (*residuals == "both") {
                cfg.residual_visual = cfg.residual_textual = true;
            } else {
                throw cma::ContractError("unknown residual placement: " + *residuals +
                                         " (valid: none, visual, textual, both)");
            }
        }
        cfg.validate();
    }
};

void write_manifest(const fs::path& out_dir, const cma::TrainConfig& cfg,
                    const std::string& data_path, const std::string& stage,
                    const fs::path& ckpt, const fs::path& report) {
    json m;
    m["config"] = cma::config_to_string(cfg);
    m["seed"] = cfg.seed;
    m["stage"] = stage;
    m["corpus_fingerprint"] = fnv1a_file(data_path);
    m["checkpoint"] = ckpt.string();
    m["reports"] = json::array({report.string()});
    const fs::path tmp = out_dir / "manifest.json.tmp";
    std::ofstream os(tmp);
    os << m.dump(2) << "\n";
    os.close();
    fs::rename(tmp, out_dir / "manifest.json");  // atomic on the same filesystem
}

// Runs the requested stages and writes checkpoint + reports into out_dir.
cma::MetricsReport run_training(const std::string& data_path, cma::TrainConfig cfg,
                                const std::string& stage, const fs::path& out_dir,
                                const std::optional<std::string>& init_ckpt,
                                bool eval_after = false, std::size_t eval_beam = 3,
                                cma::MetricsReport* draft_report = nullptr) {
    cma::Dataset ds = load_dataset(data_path);
    fs::create_directories(out_dir);
    const fs::path ckpt_path = out_dir / "checkpoint.bin";
    const fs::path report_path = out_dir / "report.jsonl";
    write_manifest(out_dir, cfg, data_path, stage, ckpt_path, report_path);

    std::optional<cma::CaptionModel> init;
    if (init_ckpt) init = cma::model_from_entries(cma::load_checkpoint(*init_ckpt));
    cma::Trainer trainer(ds, cfg, std::move(init));
    std::ofstream report(report_path);
    if (stage == "xe" || stage == "both") trainer.run_xe_stage(&report);
    if (stage == "scst" || stage == "both") trainer.run_scst_stage(&report);
    cma::save_checkpoint(trainer.checkpoint_entries(), ckpt_path.string());

    cma::MetricsReport refined;
    if (eval_after) {
        refined = cma::evaluate_model(trainer.model(), ds, ds.val_idx, eval_beam, true,
                                      ds.reward_idf);
        if (draft_report)
            *draft_report = cma::evaluate_model(trainer.model(), ds, ds.val_idx, eval_beam, false,
                                                ds.reward_idf);
    }
    return refined;
}

int cmd_gen_data(const std::string& out, std::size_t num_scenes, std::uint64_t seed) {
    auto corpus = cma::synth::generate_corpus(num_scenes, seed);
    std::ofstream os(out);
    if (!os) {
        std::cerr << "error: cannot open output path " << out << "\n";
        return kExitUsage;
    }
    cma::synth::save_corpus(corpus, os);
    std::vector<std::vector<std::string>> refs;
    for (const auto& c : corpus) refs.push_back(c.refs);
    auto vocab = cma::synth::build_vocabulary(refs);
    std::cout << "wrote " << num_scenes << " scenes to " << out << "\n";
    std::cout << "vocabulary: " << vocab.size() << " entries:";
    for (std::size_t i = 0; i < std::min<std::size_t>(vocab.size(), 10); ++i)
        std::cout << " " << vocab.word_at(static_cast<int>(i));
    std::cout << (vocab.size() > 10 ? " ...\n" : "\n");
    return 0;
}

int cmd_eval(const std::string& data, const std::string& ckpt, const std::string& which,
             std::size_t beam, std::ostream& out) {
    cma::Dataset ds = load_dataset(data);
    cma::CaptionModel model = cma::model_from_entries(cma::load_checkpoint(ckpt));
    if (model.cfg.vocab_size != ds.vocab.size())
        throw cma::CorruptArtifactError("checkpoint vocabulary size does not match corpus");
    // Held-out scenes; IDF over the evaluated reference corpus.
    std::vector<std::vector<cma::TokenSeq>> eval_refs;
    for (std::size_t i : ds.val_idx) eval_refs.push_back(ds.items[i].ref_tokens);
    auto idf = cma::CorpusIdf::build(eval_refs);
    if (which == "draft" || which == "both") {
        auto rep = cma::evaluate_model(model, ds, ds.val_idx, beam, false, idf);
        json j = rep.to_json();
        j["which"] = "draft";
        out << j.dump() << "\n";
    }
    if (which == "refined" || which == "both") {
        auto rep = cma::evaluate_model(model, ds, ds.val_idx, beam, true, idf);
        json j = rep.to_json();
        j["which"] = "refined";
        out << j.dump() << "\n";
    }
    return 0;
}

int cmd_dump_attention(const std::string& data, const std::string& ckpt,
                       const std::string& scene_id, const std::string& out_path) {
    cma::Dataset ds = load_dataset(data);
    cma::CaptionModel model = cma::model_from_entries(cma::load_checkpoint(ckpt));
    const cma::DatasetItem* item = nullptr;
    for (const auto& it : ds.items)
        if (it.id == scene_id) item = &it;
    if (!item) {
        std::cerr << "error: unknown scene id " << scene_id << "\n";
        return kExitUsage;
    }
    cma::NoGradGuard ng;
    cma::Tensor vr = model.refine_features(item->features);
    cma::Caption draft = cma::greedy_decode(cma::draft_stepper(model, vr),
                                            cma::DecoderState::zeros(model.cfg.d_d),
                                            model.cfg.vocab_size);
    cma::Tensor vd = model.embed_draft(draft);
    auto [a, b] = model.project_modalities(vr, vd);

    // Greedy refined decode, recording per-step CMA weights.
    std::vector<cma::CmaOutput> step_weights;
    std::vector<int> refined_tokens;
    cma::DecoderState st = cma::DecoderState::zeros(model.cfg.d_d);
    int prev = cma::Vocabulary::kPad;
    while (refined_tokens.size() < cma::kMaxContentTokens) {
        auto o = model.deliberation_step(a, b, prev, st);
        step_weights.push_back(o.cma);
        const int tok = cma::argmax_token(o.dist);
        if (tok == cma::Vocabulary::kPad) {
            step_weights.pop_back();  // no refined word emitted at this step
            break;
        }
        refined_tokens.push_back(tok);
        prev = tok;
        st = o.state;
    }
    cma::Caption refined = cma::Caption::from_content(refined_tokens, cma::CaptionRole::kRefined,
                                                      model.cfg.vocab_size);

    std::vector<std::string> draft_words, region_labels;
    for (int t : draft.tokens) draft_words.push_back(ds.vocab.word_at(t));
    for (std::size_t r = 0; r < item->features.rows(); ++r)
        region_labels.push_back("region_" + std::to_string(r));

    std::ofstream os(out_path);
    if (!os) {
        std::cerr << "error: cannot open output path " << out_path << "\n";
        return kExitUsage;
    }
    const std::string draft_text = draft.text(ds.vocab);
    const std::string refined_text = refined.text(ds.vocab);
    auto dump_rows = [&](std::size_t step, const std::vector<cma::Tensor>& weights,
                         const char* modality, const std::vector<std::string>& tokens) {
        for (std::size_t h = 0; h < weights.size(); ++h) {
            json j;
            j["step"] = step;
            j["head"] = h;
            j["modality"] = modality;
            auto w = json::array();
            for (std::size_t i = 0; i < weights[h].size(); ++i) w.push_back(weights[h].at(i));
            j["weights"] = std::move(w);
            j["tokens"] = tokens;
            j["draft"] = draft_text;
            j["refined"] = refined_text;
            os << j.dump() << "\n";
        }
    };
    for (std::size_t t = 0; t < step_weights.size(); ++t) {
        dump_rows(t, step_weights[t].visual_weights, "visual", region_labels);
        dump_rows(t, step_weights[t].textual_weights, "textual", draft_words);
    }
    std::cout << "wrote " << step_weights.size() << " steps to " << out_path << "\n";
    return 0;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ','))
        if (!part.empty()) out.push_back(part);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-pass caption model: drafting + cross-modification deliberation"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene corpus");
    std::size_t num_scenes = 0;
    std::uint64_t gen_seed = 1;
    std::string gen_out;
    gen->add_option("--num-scenes", num_scenes, "number of scenes")->required();
    gen->add_option("--seed", gen_seed, "corpus seed");
    gen->add_option("--out", gen_out, "output corpus path")->required();

    // train
    auto* train = app.add_subcommand("train", "train the two-pass model");
    std::string train_data, train_config, train_out_dir, train_stage = "both";
    std::string init_ckpt;
    TrainOverrides ov;
    train->add_option("--data", train_data)->required();
    train->add_option("--config", train_config, "key = value config file");
    train->add_option("--out-dir", train_out_dir)->required();
    train->add_option("--stage", train_stage)->check(CLI::IsMember({"xe", "scst", "both"}));
    train->add_option("--init-checkpoint", init_ckpt, "resume from a checkpoint");
    double ov_lxe = 0.0, ov_lrl = 0.0;
    std::size_t ov_xe = 0, ov_scst = 0, ov_batch = 0;
    std::uint64_t ov_seed = 0;
    std::string ov_mode, ov_res;
    train->add_option("--lambda-xe", ov_lxe);
    train->add_option("--lambda-rl", ov_lrl);
    train->add_option("--xe-epochs", ov_xe);
    train->add_option("--scst-epochs", ov_scst);
    train->add_option("--batch-size", ov_batch);
    train->add_option("--seed", ov_seed);
    train->add_option("--mode", ov_mode);
    train->add_option("--residuals", ov_res);

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out scenes");
    std::string eval_data, eval_ckpt, eval_which = "both";
    std::size_t eval_beam = 3;
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--checkpoint", eval_ckpt)->required();
    eval->add_option("--which", eval_which)->check(CLI::IsMember({"draft", "refined", "both"}));
    eval->add_option("--beam", eval_beam);

    // ablate
    auto* ablate = app.add_subcommand("ablate", "train one configuration per mode/residual row");
    std::string ab_data, ab_modes = "cma_d", ab_residuals = "visual", ab_out_dir = "ablation";
    std::size_t ab_xe_epochs = 10, ab_scst_epochs = 0, ab_batch = 50;
    std::uint64_t ab_seed = 1;
    ablate->add_option("--data", ab_data)->required();
    ablate->add_option("--modes", ab_modes, "comma-separated CMA modes");
    ablate->add_option("--residuals", ab_residuals, "comma-separated residual placements");
    ablate->add_option("--out-dir", ab_out_dir);
    ablate->add_option("--xe-epochs", ab_xe_epochs);
    ablate->add_option("--scst-epochs", ab_scst_epochs);
    ablate->add_option("--batch-size", ab_batch);
    ablate->add_option("--seed", ab_seed);

    // sweep
    auto* sweep = app.add_subcommand("sweep", "train one run per trade-off coefficient");
    std::string sw_data, sw_lxe, sw_lrl, sw_out_dir = "sweep";
    std::size_t sw_xe_epochs = 10, sw_scst_epochs = 0, sw_batch = 50;
    std::uint64_t sw_seed = 1;
    sweep->add_option("--data", sw_data)->required();
    sweep->add_option("--lambda-xe", sw_lxe, "comma-separated lambda_xe values");
    sweep->add_option("--lambda-rl", sw_lrl, "comma-separated lambda_rl values");
    sweep->add_option("--out-dir", sw_out_dir);
    sweep->add_option("--xe-epochs", sw_xe_epochs);
    sweep->add_option("--scst-epochs", sw_scst_epochs);
    sweep->add_option("--batch-size", sw_batch);
    sweep->add_option("--seed", sw_seed);

    // dump-attention
    auto* dump = app.add_subcommand("dump-attention", "per-step CMA weights for one scene");
    std::string dp_data, dp_ckpt, dp_scene, dp_out;
    dump->add_option("--data", dp_data)->required();
    dump->add_option("--checkpoint", dp_ckpt)->required();
    dump->add_option("--scene-id", dp_scene)->required();
    dump->add_option("--out", dp_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (gen->parsed()) {
            if (num_scenes == 0) {
                std::cerr << "error: --num-scenes must be >= 1\n";
                return kExitUsage;
            }
            return cmd_gen_data(gen_out, num_scenes, gen_seed);
        }
        if (train->parsed()) {
            if (train->count("--lambda-xe")) ov.lambda_xe = ov_lxe;
            if (train->count("--lambda-rl")) ov.lambda_rl = ov_lrl;
            if (train->count("--xe-epochs")) ov.xe_epochs = ov_xe;
            if (train->count("--scst-epochs")) ov.scst_epochs = ov_scst;
            if (train->count("--batch-size")) ov.batch_size = ov_batch;
            if (train->count("--seed")) ov.seed = ov_seed;
            if (train->count("--mode")) ov.mode = ov_mode;
            if (train->count("--residuals")) ov.residuals = ov_res;
            cma::TrainConfig cfg =
                train_config.empty() ? cma::TrainConfig{} : cma::load_config(train_config);
            ov.apply(cfg);
            std::optional<std::string> init =
                init_ckpt.empty() ? std::nullopt : std::optional<std::string>(init_ckpt);
            run_training(train_data, cfg, train_stage, train_out_dir, init);
            std::cout << "checkpoint: " << (fs::path(train_out_dir) / "checkpoint.bin").string()
                      << "\n";
            return 0;
        }
        if (eval->parsed()) return cmd_eval(eval_data, eval_ckpt, eval_which, eval_beam, std::cout);
        if (ablate->parsed()) {
            const auto modes = split_csv(ab_modes);
            const auto residuals = split_csv(ab_residuals);
            if (modes.empty()) {
                std::cerr << "error: --modes is empty\n";
                return kExitUsage;
            }
            fs::create_directories(ab_out_dir);
            std::ofstream table(fs::path(ab_out_dir) / "ablation.jsonl");
            for (const auto& mode : modes) {
                // Residual placement only applies to the full cma_d pipeline.
                const std::vector<std::string> rows =
                    mode == "cma_d" ? residuals : std::vector<std::string>{"none"};
                for (const auto& res : rows) {
                    cma::TrainConfig cfg;
                    cfg.mode = cma::cma_mode_from(mode);
                    cfg.xe_epochs = ab_xe_epochs;
                    cfg.scst_epochs = ab_scst_epochs;
                    cfg.batch_size = ab_batch;
                    cfg.seed = ab_seed;
                    TrainOverrides r;
                    r.residuals = res;
                    r.apply(cfg);
                    const fs::path dir = fs::path(ab_out_dir) / (mode + "_" + res);
                    cma::MetricsReport draft_rep;
                    auto refined_rep = run_training(ab_data, cfg, ab_scst_epochs > 0 ? "both" : "xe",
                                                    dir, std::nullopt, true, 3, &draft_rep);
                    json row;
                    row["mode"] = mode;
                    row["residuals"] = res;
                    row["seed"] = ab_seed;
                    row["draft"] = draft_rep.to_json();
                    row["refined"] = refined_rep.to_json();
                    table << row.dump() << "\n";
                    std::cout << row.dump() << "\n";
                }
            }
            return 0;
        }
        if (sweep->parsed()) {
            const bool xe_sweep = !sw_lxe.empty();
            const auto lambdas = split_csv(xe_sweep ? sw_lxe : sw_lrl);
            if (lambdas.empty()) {
                std::cerr << "error: provide --lambda-xe or --lambda-rl\n";
                return kExitUsage;
            }
            fs::create_directories(sw_out_dir);
            std::ofstream table(fs::path(sw_out_dir) / "sweep.jsonl");
            for (const auto& ls : lambdas) {
                const double lambda = std::stod(ls);
                if (lambda < 0.0) {
                    std::cerr << "error: lambda must be >= 0, got " << ls << "\n";
                    return kExitUsage;
                }
                cma::TrainConfig cfg;
                cfg.xe_epochs = sw_xe_epochs;
                cfg.batch_size = sw_batch;
                cfg.seed = sw_seed;
                std::string stage = "xe";
                if (xe_sweep) {
                    cfg.lambda_xe = lambda;
                    cfg.scst_epochs = sw_scst_epochs;
                    if (sw_scst_epochs > 0) stage = "both";
                } else {
                    cfg.lambda_rl = lambda;
                    cfg.scst_epochs = sw_scst_epochs > 0 ? sw_scst_epochs : 5;
                    stage = "both";
                }
                const fs::path dir =
                    fs::path(sw_out_dir) / ((xe_sweep ? "xe_" : "rl_") + ls);
                cma::MetricsReport draft_rep;
                auto refined_rep =
                    run_training(sw_data, cfg, stage, dir, std::nullopt, true, 3, &draft_rep);
                json row;
                row[xe_sweep ? "lambda_xe" : "lambda_rl"] = lambda;
                row["seed"] = sw_seed;
                row["draft"] = draft_rep.to_json();
                row["refined"] = refined_rep.to_json();
                table << row.dump() << "\n";
                std::cout << row.dump() << "\n";
            }
            return 0;
        }
        if (dump->parsed()) return cmd_dump_attention(dp_data, dp_ckpt, dp_scene, dp_out);
    } catch (const cma::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const cma::CorruptArtifactError& e) {
        std::cerr << "corrupt artifact: " << e.what() << "\n";
        return kExitCorrupt;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
