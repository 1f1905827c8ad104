#pragma once

// Joint optimization of the drafting and deliberation models: cross-entropy
// stage (trade-off lambda_xe, label smoothing, scheduled sampling) followed
// by self-critical sequence training (lambda_rl, greedy baselines, CIDEr-D
// reward). Drafts fed to the deliberation model come from greedy decoding
// under the current drafting parameters in both stages; no gradient flows
// through the discrete draft tokens, only through the shared refining
// encoder.

#include <cmath>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cma/captioner.hpp"
#include "cma/checkpoint.hpp"
#include "cma/config.hpp"
#include "cma/decode.hpp"
#include "cma/metrics.hpp"
#include "cma/synth_data.hpp"
#include "cma/tensor.hpp"
#include "cma/vocab.hpp"

namespace cma {

// ---------------------------------------------------------------------------
// Dataset

struct DatasetItem {
    std::string id;
    Tensor features;                  // n x d_b raw region features
    std::vector<Caption> refs;        // encoded, 18-slot layout
    std::vector<TokenSeq> ref_tokens; // content tokens for metric computation
};

struct Dataset {
    Vocabulary vocab;
    std::vector<DatasetItem> items;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> val_idx;  // every 10th scene is held out
    CorpusIdf reward_idf;              // frozen from training references

    static Dataset build(const std::vector<synth::CorpusItem>& corpus) {
        if (corpus.empty()) throw ContractError("dataset: empty corpus");
        Dataset ds;
        std::vector<std::vector<std::string>> all_refs;
        for (const auto& c : corpus) all_refs.push_back(c.refs);
        ds.vocab = synth::build_vocabulary(all_refs);
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            DatasetItem item;
            item.id = corpus[i].scene.id;
            item.features = corpus[i].features;
            for (const auto& r : corpus[i].refs) {
                Caption c = synth::encode_caption(r, ds.vocab);
                item.ref_tokens.push_back(c.content());
                item.refs.push_back(std::move(c));
            }
            ds.items.push_back(std::move(item));
            if (i % 10 == 0)
                ds.val_idx.push_back(i);
            else
                ds.train_idx.push_back(i);
        }
        std::vector<std::vector<TokenSeq>> train_refs;
        for (std::size_t i : ds.train_idx) train_refs.push_back(ds.items[i].ref_tokens);
        ds.reward_idf = CorpusIdf::build(train_refs);
        return ds;
    }
};

// ---------------------------------------------------------------------------
// Schedules and per-step pieces

// Target keeps 1 - confidence; the remaining mass is spread uniformly over
// the other vocabulary entries.
inline std::vector<double> label_smooth(int target, std::size_t vocab_size, double confidence) {
    if (target < 0 || static_cast<std::size_t>(target) >= vocab_size)
        throw VocabularyError("label_smooth: target " + std::to_string(target) +
                              " out of vocabulary of size " + std::to_string(vocab_size));
    std::vector<double> q(vocab_size, vocab_size > 1 ? confidence / static_cast<double>(vocab_size - 1) : 0.0);
    q[static_cast<std::size_t>(target)] = 1.0 - confidence;
    return q;
}

// min(cap, increment * floor(epoch / every))
inline double scheduled_sampling_prob(std::size_t epoch, double increment = 0.05,
                                      std::size_t every = 5, double cap = 0.5) {
    return std::min(cap, increment * static_cast<double>(epoch / every));
}

enum class TrainStage { kXe, kScst };

inline double lr_schedule(TrainStage stage, std::size_t epoch, std::size_t plateau_events,
                          const TrainConfig& cfg) {
    if (stage == TrainStage::kXe) return cfg.xe_lr * std::pow(0.8, static_cast<double>(epoch / 3));
    return cfg.scst_lr * std::pow(0.5, static_cast<double>(plateau_events));
}

namespace detail {

// Summed negative log-likelihood of the reference content tokens under
// teacher forcing with scheduled sampling and label smoothing. The step
// closure maps (input token, state) -> (distribution, next state).
template <class State, class StepFn>
Tensor teacher_forced_nll_with_state(StepFn&& step, State st, const Caption& ref,
                                     std::size_t vocab_size, double smoothing, double ss_prob,
                                     std::mt19937_64& rng) {
    const std::size_t t_max = ref.content_length();
    if (t_max == 0) return Tensor::scalar(0.0);
    Tensor loss = Tensor::scalar(0.0);
    int input = Vocabulary::kPad;  // boundary PAD starts the sequence
    for (std::size_t t = 1; t <= t_max; ++t) {
        auto [dist, next] = step(input, st);
        const int target = ref.tokens[t];
        Tensor q = Tensor::from({1, vocab_size}, label_smooth(target, vocab_size, smoothing));
        loss = add(loss, scale(sum_all(mul(q, log_op(dist))), -1.0));
        st = std::move(next);
        // Scheduled sampling: occasionally feed the model's own sample
        // instead of the reference token.
        if (ss_prob > 0.0 && std::uniform_real_distribution<double>(0.0, 1.0)(rng) < ss_prob) {
            const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            double cum = 0.0;
            int tok = static_cast<int>(dist.size()) - 1;
            for (std::size_t i = 0; i < dist.size(); ++i) {
                cum += dist.at(i);
                if (u < cum) {
                    tok = static_cast<int>(i);
                    break;
                }
            }
            input = tok;
        } else {
            input = target;
        }
    }
    return loss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Cross-entropy stage

struct XeLoss {
    Tensor total;       // draft_term + lambda_xe * delib_term
    Tensor draft_term;  // L_XE(theta_1)
    Tensor delib_term;  // L_XE(theta_2); scalar zero when lambda_xe == 0
    Caption draft;      // greedy draft fed to the deliberation model
};

// Joint XE loss for one item. The draft conditioning the deliberation model
// is produced by greedy decoding under the current drafting parameters.
inline XeLoss xe_item_loss(const CaptionModel& m, const DatasetItem& item, const Caption& ref,
                           const TrainConfig& cfg, double ss_prob, std::mt19937_64& rng) {
    Tensor vr = m.refine_features(item.features);
    XeLoss out;
    {
        NoGradGuard ng;
        out.draft =
            greedy_decode(draft_stepper(m, vr), DecoderState::zeros(m.cfg.d_d), m.cfg.vocab_size);
    }
    const std::size_t d = m.cfg.d_d;
    auto draft_step = [&](int prev, const DecoderState& st) {
        auto o = m.drafting_step(vr, prev, st);
        return std::pair<Tensor, DecoderState>(o.dist, o.state);
    };
    out.draft_term = detail::teacher_forced_nll_with_state(
        draft_step, DecoderState::zeros(d), ref, m.cfg.vocab_size, cfg.label_smoothing, ss_prob, rng);

    if (cfg.lambda_xe > 0.0) {
        Tensor vd = m.embed_draft(out.draft);
        auto [a, b] = m.project_modalities(vr, vd);
        auto delib_step = [&](int prev, const DecoderState& st) {
            auto o = m.deliberation_step(a, b, prev, st);
            return std::pair<Tensor, DecoderState>(o.dist, o.state);
        };
        out.delib_term = detail::teacher_forced_nll_with_state(
            delib_step, DecoderState::zeros(d), ref, m.cfg.vocab_size, cfg.label_smoothing, ss_prob,
            rng);
        out.total = add(out.draft_term, scale(out.delib_term, cfg.lambda_xe));
    } else {
        out.delib_term = Tensor::scalar(0.0);
        out.total = out.draft_term;
    }
    return out;
}

// ---------------------------------------------------------------------------
// SCST stage

struct RewardRecord {
    double sampled_reward = 0.0;
    double baseline = 0.0;
    double advantage() const { return sampled_reward - baseline; }
};

struct ScstItemResult {
    Tensor surrogate;  // gradient carrier: -(r - b) log p, draft + lambda_rl * delib
    RewardRecord draft;
    RewardRecord refined;
};

inline ScstItemResult scst_item(const CaptionModel& m, const DatasetItem& item,
                                const TrainConfig& cfg, const CorpusIdf& idf,
                                std::mt19937_64& rng) {
    auto reward = [&](const Caption& c) {
        return cider_d_item(c.content(), item.ref_tokens, idf);
    };
    Tensor vr = m.refine_features(item.features);
    const std::size_t d = m.cfg.d_d;

    Caption greedy_draft;
    {
        NoGradGuard ng;
        greedy_draft =
            greedy_decode(draft_stepper(m, vr), DecoderState::zeros(d), m.cfg.vocab_size);
    }

    ScstItemResult out;
    out.draft.baseline = reward(greedy_draft);
    auto sampled_draft =
        sample_decode(draft_stepper(m, vr), DecoderState::zeros(d), m.cfg.vocab_size, rng);
    out.draft.sampled_reward = reward(sampled_draft.caption);
    Tensor logp_draft = Tensor::scalar(0.0);
    for (const auto& lp : sampled_draft.step_log_probs) logp_draft = add(logp_draft, lp);
    out.surrogate = scale(logp_draft, -out.draft.advantage());

    if (cfg.lambda_rl > 0.0) {
        Tensor vd = m.embed_draft(greedy_draft);
        auto [a, b] = m.project_modalities(vr, vd);
        Caption greedy_refined;
        {
            NoGradGuard ng;
            greedy_refined =
                greedy_decode(delib_stepper(m, a, b), DecoderState::zeros(d), m.cfg.vocab_size);
        }
        out.refined.baseline = reward(greedy_refined);
        auto sampled_refined =
            sample_decode(delib_stepper(m, a, b), DecoderState::zeros(d), m.cfg.vocab_size, rng);
        out.refined.sampled_reward = reward(sampled_refined.caption);
        Tensor logp_ref = Tensor::scalar(0.0);
        for (const auto& lp : sampled_refined.step_log_probs) logp_ref = add(logp_ref, lp);
        out.surrogate = add(out.surrogate,
                            scale(logp_ref, -cfg.lambda_rl * out.refined.advantage()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct MetricsReport {
    std::array<double, 4> bleu{};
    double rouge_l = 0.0;
    double cider_d = 0.0;
    std::size_t items = 0;

    nlohmann::json to_json() const {
        return {{"B1", bleu[0]}, {"B2", bleu[1]},   {"B3", bleu[2]},      {"B4", bleu[3]},
                {"ROUGE_L", rouge_l}, {"CIDEr_D", cider_d}, {"items", items}};
    }
};

// Decodes the requested pass for each item (beam search; beam = 1 is exactly
// greedy) and scores against the item references. The refined pass is
// conditioned on the same-beam draft.
inline MetricsReport evaluate_model(const CaptionModel& m, const Dataset& ds,
                                    const std::vector<std::size_t>& indices, std::size_t beam,
                                    bool refined_pass, const CorpusIdf& idf) {
    NoGradGuard ng;
    std::vector<TokenSeq> cands;
    std::vector<std::vector<TokenSeq>> refs;
    for (std::size_t i : indices) {
        const auto& item = ds.items[i];
        Tensor vr = m.refine_features(item.features);
        Caption draft = beam_search(draft_stepper(m, vr), DecoderState::zeros(m.cfg.d_d),
                                    m.cfg.vocab_size, beam);
        Caption out = draft;
        if (refined_pass) {
            Tensor vd = m.embed_draft(draft);
            auto [a, b] = m.project_modalities(vr, vd);
            out = beam_search(delib_stepper(m, a, b), DecoderState::zeros(m.cfg.d_d),
                              m.cfg.vocab_size, beam);
        }
        cands.push_back(out.content());
        refs.push_back(item.ref_tokens);
    }
    MetricsReport rep;
    rep.items = cands.size();
    if (!cands.empty()) {
        rep.bleu = bleu(cands, refs).b;
        rep.rouge_l = rouge_l_corpus(cands, refs);
        rep.cider_d = cider_d(cands, refs, idf).mean;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint

inline NamedTensors model_to_entries(const CaptionModel& m) {
    NamedTensors entries;
    const auto& c = m.cfg;
    entries.emplace_back(
        "meta", Tensor::from({11}, {static_cast<double>(c.vocab_size), static_cast<double>(c.d_b),
                                    static_cast<double>(c.d_r), static_cast<double>(c.d_d),
                                    static_cast<double>(c.heads), static_cast<double>(c.d_c),
                                    static_cast<double>(c.d_cp), static_cast<double>(c.d_o),
                                    static_cast<double>(static_cast<int>(c.mode)),
                                    c.residual_visual ? 1.0 : 0.0,
                                    c.residual_textual ? 1.0 : 0.0}));
    for (auto& [name, t] : m.named_params()) entries.emplace_back(name, t);
    return entries;
}

inline CaptionModel model_from_entries(const NamedTensors& entries) {
    if (entries.empty() || entries[0].first != "meta" || entries[0].second.size() != 11)
        throw CorruptArtifactError("checkpoint: missing or malformed meta entry");
    const auto& meta = entries[0].second;
    ModelConfig cfg;
    cfg.vocab_size = static_cast<std::size_t>(meta.at(0));
    cfg.d_b = static_cast<std::size_t>(meta.at(1));
    cfg.d_r = static_cast<std::size_t>(meta.at(2));
    cfg.d_d = static_cast<std::size_t>(meta.at(3));
    cfg.heads = static_cast<std::size_t>(meta.at(4));
    cfg.d_c = static_cast<std::size_t>(meta.at(5));
    cfg.d_cp = static_cast<std::size_t>(meta.at(6));
    cfg.d_o = static_cast<std::size_t>(meta.at(7));
    cfg.mode = static_cast<CmaMode>(static_cast<int>(meta.at(8)));
    cfg.residual_visual = meta.at(9) != 0.0;
    cfg.residual_textual = meta.at(10) != 0.0;
    CaptionModel m = CaptionModel::create(cfg, 0);
    auto named = m.named_params();
    if (named.size() + 1 != entries.size())
        throw CorruptArtifactError("checkpoint: expected " + std::to_string(named.size() + 1) +
                                   " entries, found " + std::to_string(entries.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& [name, t] = entries[i + 1];
        if (name != named[i].first)
            throw CorruptArtifactError("checkpoint: entry " + std::to_string(i + 1) + " is '" +
                                       name + "', expected '" + named[i].first + "'");
        if (t.shape() != named[i].second.shape())
            throw CorruptArtifactError("checkpoint: entry '" + name + "' has shape " +
                                       shape_str(t.shape()) + ", expected " +
                                       shape_str(named[i].second.shape()));
        named[i].second.mutable_values() = t.values();
    }
    return m;
}

// ---------------------------------------------------------------------------
// Trainer

struct EpochReport {
    std::size_t epoch = 0;
    std::string stage;
    double loss_draft = 0.0;
    double loss_delib = 0.0;
    double reward_mean = 0.0;
    double lr = 0.0;
    double cider_draft = 0.0;
    double cider_refined = 0.0;

    nlohmann::json to_json() const {
        return {{"epoch", epoch},
                {"stage", stage},
                {"loss_draft", loss_draft},
                {"loss_delib", loss_delib},
                {"reward_mean", reward_mean},
                {"lr", lr},
                {"metrics", {{"CIDEr_D_draft", cider_draft}, {"CIDEr_D_refined", cider_refined}}}};
    }
};

class Trainer {
  public:
    Trainer(const Dataset& ds, const TrainConfig& cfg,
            std::optional<CaptionModel> init_model = std::nullopt)
        : ds_(ds), cfg_(cfg), rng_(cfg.seed) {
        cfg_.validate();
        if (ds_.items.empty()) throw ContractError("trainer: empty dataset");
        if (init_model) {
            if (init_model->cfg.vocab_size != ds_.vocab.size())
                throw ContractError("trainer: checkpoint vocabulary size " +
                                    std::to_string(init_model->cfg.vocab_size) +
                                    " does not match dataset vocabulary " +
                                    std::to_string(ds_.vocab.size()));
            model_ = std::move(*init_model);
        } else {
            ModelConfig mc;
            mc.vocab_size = ds_.vocab.size();
            mc.d_b = synth::kFeatureDim;
            mc.d_r = cfg.d_r;
            mc.d_d = cfg.d_d;
            mc.heads = cfg.heads;
            mc.d_c = cfg.d_c;
            mc.d_cp = cfg.d_c;
            mc.d_o = cfg.d_o;
            mc.mode = cfg.mode;
            mc.residual_visual = cfg.residual_visual;
            mc.residual_textual = cfg.residual_textual;
            model_ = CaptionModel::create(mc, cfg.seed);
        }
        params_ = model_.all_params();
        adam_.beta1 = 0.9;
        adam_.beta2 = 0.999;
        adam_.eps = 1e-8;
    }

    CaptionModel& model() { return model_; }
    const CaptionModel& model() const { return model_; }
    const std::vector<EpochReport>& reports() const { return reports_; }

    void run_xe_stage(std::ostream* report_out = nullptr) {
        for (std::size_t epoch = 0; epoch < cfg_.xe_epochs; ++epoch) {
            const double lr = lr_schedule(TrainStage::kXe, epoch, 0, cfg_);
            const double ss = scheduled_sampling_prob(epoch, cfg_.ss_increment, cfg_.ss_every,
                                                      cfg_.ss_cap);
            adam_.lr = lr;
            EpochReport rep;
            rep.epoch = epoch;
            rep.stage = "xe";
            rep.lr = lr;
            auto order = shuffled_train_order();
            std::size_t seen = 0;
            for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
                GradMap accum;
                for (std::size_t k = start; k < end; ++k) {
                    const auto& item = ds_.items[order[k]];
                    const Caption& ref = item.refs[(epoch + order[k]) % item.refs.size()];
                    XeLoss loss = xe_item_loss(model_, item, ref, cfg_, ss, rng_);
                    check_finite(loss.total.item(), "xe", epoch, item.id);
                    rep.loss_draft += loss.draft_term.item();
                    rep.loss_delib += loss.delib_term.item();
                    Tensor scaled = scale(loss.total, 1.0 / static_cast<double>(end - start));
                    merge_grads(accum, backward(scaled));
                    ++seen;
                }
                clip_gradients(accum, cfg_.clip_lo, cfg_.clip_hi);
                adam_step(params_, accum, adam_);
            }
            rep.loss_draft /= static_cast<double>(std::max<std::size_t>(seen, 1));
            rep.loss_delib /= static_cast<double>(std::max<std::size_t>(seen, 1));
            validate_into(rep);
            emit(rep, report_out);
        }
    }

    void run_scst_stage(std::ostream* report_out = nullptr) {
        double best_cider = -1.0;
        std::size_t stall = 0;
        std::size_t plateau_events = 0;
        for (std::size_t epoch = 0; epoch < cfg_.scst_epochs; ++epoch) {
            const double lr = lr_schedule(TrainStage::kScst, epoch, plateau_events, cfg_);
            adam_.lr = lr;
            EpochReport rep;
            rep.epoch = cfg_.xe_epochs + epoch;
            rep.stage = "scst";
            rep.lr = lr;
            auto order = shuffled_train_order();
            std::size_t seen = 0;
            for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
                GradMap accum;
                for (std::size_t k = start; k < end; ++k) {
                    const auto& item = ds_.items[order[k]];
                    ScstItemResult r = scst_item(model_, item, cfg_, ds_.reward_idf, rng_);
                    check_finite(r.surrogate.item(), "scst", epoch, item.id);
                    rep.reward_mean += r.refined.sampled_reward;
                    if (r.surrogate.requires_grad()) {
                        Tensor scaled = scale(r.surrogate, 1.0 / static_cast<double>(end - start));
                        merge_grads(accum, backward(scaled));
                    }
                    ++seen;
                }
                clip_gradients(accum, cfg_.clip_lo, cfg_.clip_hi);
                adam_step(params_, accum, adam_);
            }
            rep.reward_mean /= static_cast<double>(std::max<std::size_t>(seen, 1));
            validate_into(rep);
            // CIDEr-D plateau rule: anneal by 0.5 after 3 evaluations without
            // improvement, then restart the counter.
            if (rep.cider_refined > best_cider) {
                best_cider = rep.cider_refined;
                stall = 0;
            } else if (++stall >= 3) {
                ++plateau_events;
                stall = 0;
            }
            emit(rep, report_out);
        }
    }

    NamedTensors checkpoint_entries() const { return model_to_entries(model_); }

  private:
    std::vector<std::size_t> shuffled_train_order() {
        auto order = ds_.train_idx;
        std::shuffle(order.begin(), order.end(), rng_);
        return order;
    }

    void validate_into(EpochReport& rep) {
        if (ds_.val_idx.empty()) return;
        rep.cider_draft = evaluate_model(model_, ds_, ds_.val_idx, 1, false, ds_.reward_idf).cider_d;
        rep.cider_refined =
            evaluate_model(model_, ds_, ds_.val_idx, 1, true, ds_.reward_idf).cider_d;
    }

    void emit(const EpochReport& rep, std::ostream* out) {
        reports_.push_back(rep);
        if (out) *out << rep.to_json().dump() << "\n";
    }

    static void check_finite(double v, const char* stage, std::size_t epoch, const std::string& id) {
        if (!std::isfinite(v))
            throw NumericalError(std::string("non-finite loss in ") + stage + " stage, epoch " +
                                 std::to_string(epoch) + ", item " + id);
    }

    static void merge_grads(GradMap& accum, const GradMap& g) {
        for (const auto& [id, vec] : g) {
            auto& dst = accum[id];
            if (dst.empty())
                dst = vec;
            else
                for (std::size_t i = 0; i < vec.size(); ++i) dst[i] += vec[i];
        }
    }

    Dataset ds_;
    TrainConfig cfg_;
    CaptionModel model_;
    std::vector<Tensor> params_;
    AdamState adam_;
    std::mt19937_64 rng_;
    std::vector<EpochReport> reports_;
};

}  // namespace cma
