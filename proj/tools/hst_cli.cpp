// Command-line front end: synthetic data, training, tokenization,
// reconstruction, cross-validation, occupancy analysis and codebook sweeps.

#include "hst/checkpoint.hpp"
#include "hst/config.hpp"
#include "hst/dataio.hpp"
#include "hst/dynstats.hpp"
#include "hst/evalkit.hpp"
#include "hst/trainkit.hpp"
#include "hst/version.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using hst::Mat;
using hst::Vec;

namespace {

// Output directory for one run. Removed on failure when this run created it.
class RunDir {
public:
    void open(const std::string& command, const std::string& explicit_out) {
        if (!explicit_out.empty()) {
            path_ = explicit_out;
        } else {
            const char* root = std::getenv("HST_OUTPUT_ROOT");
            const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
            std::tm tm{};
            localtime_r(&now, &tm);
            std::ostringstream name;
            name << command << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
            fs::path base = fs::path(root && *root ? root : "runs") / name.str();
            path_ = base;
            for (int i = 1; fs::exists(path_); ++i) path_ = base.string() + "-" + std::to_string(i);
        }
        created_ = !fs::exists(path_);
        fs::create_directories(path_);
    }

    const fs::path& path() const { return path_; }

    fs::path file(const std::string& name) {
        auto p = path_ / name;
        written_.push_back(p);
        return p;
    }

    void discard() {
        std::error_code ec;
        if (path_.empty()) return;
        if (created_) {
            fs::remove_all(path_, ec);
        } else {
            for (const auto& p : written_) fs::remove_all(p, ec);
        }
    }

private:
    fs::path path_;
    bool created_ = false;
    std::vector<fs::path> written_;
};

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p);
    if (!out) throw hst::LoadError("cannot write " + p.string());
    out << j.dump(2) << "\n";
}

class JsonLines {
public:
    explicit JsonLines(const fs::path& p) : out_(p) {
        if (!out_) throw hst::LoadError("cannot write " + p.string());
    }
    void operator()(const std::string& line) { out_ << line << "\n"; }

private:
    std::ofstream out_;
};

// Model and training flags shared by the training commands. Explicit flags
// override values from --config.
struct ModelFlags {
    std::string config_path;
    std::string backend;
    int hidden = 0, ssm_layers = 0, encoder_layers = 0, decoder_layers = 0, heads = 0;
    int state_codes = 0, transition_codes = 0, residual_codes = 0;
    std::string quant_mode;
    double commitment = -1.0, beta = -1.0, gamma_loss = -1.0;
    int window = 0, stride = 0, steps = -1, epochs = -1, batch = 0, log_every = 0;
    double lr = 0.0;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* app, bool training) {
        app->add_option("--config", config_path, "JSON file with \"model\" and \"train\" objects");
        app->add_option("--backend", backend, "rnn | lstm | gru | mamba");
        app->add_option("--hidden", hidden, "Backbone width D");
        app->add_option("--ssm-layers", ssm_layers, "Backbone layers");
        app->add_option("--encoder-layers", encoder_layers, "Encoder transformer layers");
        app->add_option("--decoder-layers", decoder_layers, "Decoder transformer layers");
        app->add_option("--heads", heads, "Attention heads (encoder and decoder)");
        app->add_option("--state-codes", state_codes, "State codebook size");
        app->add_option("--transition-codes", transition_codes, "Transition codebook size");
        app->add_option("--residual-codes", residual_codes, "Residual codebook sizes");
        app->add_option("--quant-mode", quant_mode, "hierarchical | flat | continuous");
        app->add_option("--commitment", commitment, "Encoder commitment weight");
        app->add_option("--beta", beta, "First-level codebook weight");
        app->add_option("--gamma-loss", gamma_loss, "Residual codebook weight");
        app->add_option("--window", window, "Window length");
        app->add_option("--stride", stride, "Window stride");
        app->add_option("--seed", seed, "Random seed");
        if (training) {
            app->add_option("--steps", steps, "Tokenizer optimizer steps");
            app->add_option("--epochs", epochs, "Classifier epochs");
            app->add_option("--batch", batch, "Batch size");
            app->add_option("--lr", lr, "Adam learning rate");
            app->add_option("--log-every", log_every, "Log every n-th tokenizer step");
        }
    }

    std::pair<hst::HstConfig, hst::TrainConfig> resolve(int rois) const {
        hst::HstConfig m;
        hst::TrainConfig t;
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw hst::LoadError("cannot open config " + config_path);
            json j = json::parse(in);
            hst::detail::reject_unknown(j, {"model", "train"}, "config");
            if (j.contains("model")) {
                json mj = j.at("model");
                if (!mj.contains("rois")) mj["rois"] = rois;
                m = hst::hst_config_from_json(mj);
            }
            if (j.contains("train")) t = hst::train_config_from_json(j.at("train"));
        }
        m.rois = rois;
        if (!backend.empty()) m.ssm.backend = hst::backend_from_string(backend);
        if (hidden) m.ssm.hidden = hidden;
        if (ssm_layers) m.ssm.layers = ssm_layers;
        if (encoder_layers) m.encoder.layers = encoder_layers;
        if (decoder_layers) m.decoder.layers = decoder_layers;
        if (heads) m.encoder.heads = m.decoder.heads = heads;
        if (state_codes) m.quant.state_codes = state_codes;
        if (transition_codes) m.quant.transition_codes = transition_codes;
        if (residual_codes) m.quant.state_residual_codes = m.quant.transition_residual_codes = residual_codes;
        if (!quant_mode.empty()) m.quant.mode = hst::quant_mode_from_string(quant_mode);
        if (commitment >= 0.0) m.loss.commitment = commitment;
        if (beta >= 0.0) m.loss.beta = beta;
        if (gamma_loss >= 0.0) m.loss.gamma_loss = gamma_loss;
        if (window) m.window = t.windows.length = window;
        if (stride) t.windows.stride = stride;
        m.window = t.windows.length;
        if (steps >= 0) t.phase1_steps = steps;
        if (epochs >= 0) t.phase2_epochs = epochs;
        if (batch) t.batch_size = batch;
        if (lr > 0.0) t.learning_rate = lr;
        if (log_every) t.log_every = log_every;
        if (seed) t.seed = *seed;
        m.validate();
        t.validate();
        return {m, t};
    }
};

json run_config(const std::string& command, const json& args) {
    return {{"command", command}, {"version", hst::kVersion}, {"args", args}};
}

json config_json(const hst::HstConfig& m, const hst::TrainConfig& t) {
    return {{"model", hst::to_json(m)}, {"train", hst::to_json(t)}};
}

hst::LoadedDataset load(const std::string& manifest) {
    auto ds = hst::load_dataset(manifest);
    if (ds.records.empty()) throw hst::ValidationError("manifest lists no subjects");
    const auto M = ds.records.front().rois();
    for (const auto& r : ds.records)
        if (r.rois() != M) throw hst::ValidationError("subject " + r.subject_id + " has a different ROI count");
    return ds;
}

void warn_short(const std::vector<hst::TimeSeriesRecord>& records, int window) {
    for (const auto& r : records)
        if (r.length() < window)
            std::cerr << "warning: subject " << r.subject_id << " has " << r.length() << " time points, fewer than the window "
                      << window << "; excluded\n";
}

// Non-overlapping windows per subject; tokens indexed by row of the record.
std::vector<hst::SubjectTokens> tokenize_records(const hst::HstModel& model, const std::vector<hst::TimeSeriesRecord>& records) {
    const int W = model.config().window;
    std::vector<hst::SubjectTokens> out;
    for (const auto& r : records) {
        if (r.length() < W) continue;
        auto ws = hst::window(hst::zscore_normalize(r.X), {W, W});
        hst::SubjectTokens st;
        st.subject_id = r.subject_id;
        st.label = r.label;
        for (const auto& tk : model.tokenize(ws)) {
            auto append = [](std::vector<int>& dst, const std::vector<int>& src) { dst.insert(dst.end(), src.begin(), src.end()); };
            append(st.tokens.state_tokens, tk.state_tokens);
            append(st.tokens.transition_tokens, tk.transition_tokens);
            append(st.tokens.state_residual_tokens, tk.state_residual_tokens);
            append(st.tokens.transition_residual_tokens, tk.transition_residual_tokens);
        }
        out.push_back(std::move(st));
    }
    return out;
}

int cmd_synth(RunDir& run, int states, int rois, int subjects, int length, double dwell, double noise,
              std::optional<double> snr, std::uint64_t seed, int groups, double radius, double mean_scale, double leak) {
    if (subjects < 1) throw hst::ConfigError("--subjects must be positive");
    if (groups != 1 && groups != 2) throw hst::ConfigError("--groups must be 1 or 2");
    auto spec_a = hst::make_switching_spec(states, rois, dwell, noise, seed, radius, mean_scale);
    auto spec_b = spec_a;
    if (groups == 2) spec_b.transition = hst::concentrated_transition(states, leak);
    fs::create_directories(run.path() / "data");
    fs::create_directories(run.path() / "states");
    run.file("data");
    run.file("states");
    std::vector<hst::ManifestEntry> entries;
    for (int i = 0; i < subjects; ++i) {
        const int label = groups == 2 && i >= subjects / 2 ? 1 : 0;
        std::ostringstream id;
        id << "sub" << std::setw(4) << std::setfill('0') << i;
        auto rec = hst::synth_switching_lds(label ? spec_b : spec_a, length, seed * 1000003ULL + static_cast<std::uint64_t>(i) + 1,
                                            id.str(), label);
        if (snr) rec.X = hst::add_observation_noise(rec.X, *snr, seed * 7919ULL + static_cast<std::uint64_t>(i) + 1);
        hst::write_matrix_csv(run.path() / "data" / (id.str() + ".csv"), rec.X);
        Mat s(rec.length(), 1);
        for (Eigen::Index t = 0; t < rec.length(); ++t) s(t, 0) = (*rec.true_states)[static_cast<std::size_t>(t)];
        hst::write_matrix_csv(run.path() / "states" / (id.str() + ".csv"), s, {"state"});
        entries.push_back({id.str(), "data/" + id.str() + ".csv", label, std::nullopt, "states/" + id.str() + ".csv"});
    }
    hst::write_manifest(run.file("manifest.csv"), entries);
    json specs{{"group_a", hst::to_json(spec_a)}};
    if (groups == 2) specs["group_b"] = hst::to_json(spec_b);
    write_json(run.file("spec.json"), specs);
    std::cout << "wrote " << subjects << " subjects to " << run.path().string() << "\n";
    return 0;
}

int cmd_train_tokenizer(RunDir& run, const std::string& manifest, const ModelFlags& flags, json& cfg_out) {
    auto ds = load(manifest);
    auto [m, t] = flags.resolve(static_cast<int>(ds.records.front().rois()));
    cfg_out = config_json(m, t);
    warn_short(ds.records, m.window);
    JsonLines log(run.file("metrics.jsonl"));
    auto ck = hst::run_tokenizer_phase(m, ds.records, t, [&](const std::string& l) { log(l); });
    hst::save_checkpoint(ck, run.file("tokenizer.ckpt"));
    std::cout << "tokenizer trained for " << ck.step << " steps; checkpoint " << (run.path() / "tokenizer.ckpt").string() << "\n";
    return 0;
}

int cmd_train_classifier(RunDir& run, const std::string& manifest, const std::string& ckpt_path, const ModelFlags& flags,
                         json& cfg_out) {
    auto ds = load(manifest);
    auto tok = hst::load_checkpoint(ckpt_path);
    if (static_cast<int>(ds.records.front().rois()) != tok.model.rois)
        throw hst::ValidationError("dataset ROI count differs from the checkpoint");
    hst::TrainConfig t = tok.train;
    if (flags.epochs >= 0) t.phase2_epochs = flags.epochs;
    if (flags.batch) t.batch_size = flags.batch;
    if (flags.lr > 0.0) t.learning_rate = flags.lr;
    if (flags.seed) t.seed = *flags.seed;
    t.validate();
    cfg_out = config_json(tok.model, t);
    warn_short(ds.records, tok.model.window);
    JsonLines log(run.file("metrics.jsonl"));
    auto ck = hst::run_classifier_phase(tok, ds.records, t, [&](const std::string& l) { log(l); });
    hst::save_checkpoint(ck, run.file("classifier.ckpt"));
    std::cout << "classifier trained for " << t.phase2_epochs << " epochs\n";
    return 0;
}

int cmd_tokenize(RunDir& run, const std::string& manifest, const std::string& ckpt_path, json& cfg_out) {
    auto ds = load(manifest);
    auto model = hst::make_model(hst::load_checkpoint(ckpt_path));
    cfg_out = {{"model", hst::to_json(model->config())}};
    warn_short(ds.records, model->config().window);
    hst::write_tokens_csv(tokenize_records(*model, ds.records), run.file("tokens.csv"));
    return 0;
}

int cmd_reconstruct(RunDir& run, const std::string& manifest, const std::string& ckpt_path, bool save, json& cfg_out) {
    auto ds = load(manifest);
    auto model = hst::make_model(hst::load_checkpoint(ckpt_path));
    cfg_out = {{"model", hst::to_json(model->config())}};
    const int W = model->config().window;
    warn_short(ds.records, W);
    std::vector<Mat> all_x, all_hat;
    json per_subject = json::array();
    if (save) {
        fs::create_directories(run.path() / "reconstruction");
        run.file("reconstruction");
    }
    for (const auto& r : ds.records) {
        if (r.length() < W) continue;
        auto ws = hst::window(hst::zscore_normalize(r.X), {W, W});
        auto rec = model->reconstruct(ws);
        auto met = hst::reconstruction_metrics(ws, rec);
        per_subject.push_back({{"subject_id", r.subject_id}, {"pearson_r", met.pearson_r}, {"mse", met.mse}});
        if (save) {
            Mat stacked(static_cast<Eigen::Index>(rec.size()) * W, r.rois());
            for (std::size_t i = 0; i < rec.size(); ++i) stacked.middleRows(static_cast<Eigen::Index>(i) * W, W) = rec[i];
            hst::write_matrix_csv(run.path() / "reconstruction" / (r.subject_id + ".csv"), stacked);
        }
        all_x.insert(all_x.end(), ws.begin(), ws.end());
        all_hat.insert(all_hat.end(), rec.begin(), rec.end());
    }
    auto met = hst::reconstruction_metrics(all_x, all_hat);
    write_json(run.file("reconstruction.json"),
               {{"pearson_r", met.pearson_r}, {"mse", met.mse}, {"windows", all_x.size()}, {"subjects", per_subject}});
    std::cout << "pearson_r " << met.pearson_r << " mse " << met.mse << "\n";
    return 0;
}

int cmd_evaluate(RunDir& run, const std::string& manifest, const ModelFlags& flags, int folds, std::uint64_t cv_seed,
                 json& cfg_out) {
    auto ds = load(manifest);
    auto [m, t] = flags.resolve(static_cast<int>(ds.records.front().rois()));
    cfg_out = config_json(m, t);
    cfg_out["folds"] = folds;
    cfg_out["cv_seed"] = cv_seed;
    warn_short(ds.records, m.window);
    JsonLines log(run.file("metrics.jsonl"));
    hst::CvOptions opt;
    opt.k = folds;
    opt.seed = cv_seed;
    opt.checkpoint_dir = run.file("folds");
    opt.sink = [&](const std::string& l) { log(l); };
    auto rep = hst::cross_validate(ds.records, m, t, opt);
    hst::write_cv_csv(rep, run.file("cv.csv"));
    std::ofstream pred(run.file("predictions.csv"));
    pred << "fold,subject_id,label,probability,prediction\n";
    for (const auto& f : rep.folds)
        for (const auto& p : f.predictions)
            pred << f.fold << "," << p.subject_id << "," << p.label << "," << p.probability << "," << p.prediction << "\n";
    std::cout << "accuracy " << rep.accuracy.mean << " +- " << rep.accuracy.std << "\n";
    return 0;
}

int cmd_analyze(RunDir& run, const std::string& tokens_path, const std::string& manifest, int state_codes,
                int transition_codes, const std::string& test, double q, bool plot, json& cfg_out) {
    auto streams = hst::read_tokens_csv(tokens_path);
    auto ds = load(manifest);
    std::map<std::string, const hst::TimeSeriesRecord*> by_id;
    for (const auto& r : ds.records) by_id[r.subject_id] = &r;
    auto max_token = [](const std::vector<std::vector<int>>& v) {
        int m = -1;
        for (const auto& s : v)
            for (int x : s) m = std::max(m, x);
        return m + 1;
    };
    const int Ks = state_codes ? state_codes : max_token(streams.state);
    const int Kt = transition_codes ? transition_codes : max_token(streams.transition);
    const auto kind = hst::test_kind_from_string(test);
    cfg_out = {{"state_codes", Ks}, {"transition_codes", Kt}, {"test", test}, {"q", q}};

    std::vector<Vec> sa, sb, ta, tb;
    std::vector<Mat> inputs;
    for (std::size_t i = 0; i < streams.subject_ids.size(); ++i) {
        auto it = by_id.find(streams.subject_ids[i]);
        if (it == by_id.end()) throw hst::ValidationError("subject " + streams.subject_ids[i] + " is not in the manifest");
        const auto& rec = *it->second;
        const bool group_b = rec.label == 1;
        (group_b ? sb : sa).push_back(hst::occupancy(streams.state[i], Ks));
        (group_b ? tb : ta).push_back(hst::occupancy(streams.transition[i], Kt));
        inputs.push_back(hst::zscore_normalize(rec.X).topRows(static_cast<Eigen::Index>(streams.state[i].size())));
    }
    auto rs = hst::group_compare(sa, sb, kind, q, "state");
    auto rt = hst::group_compare(ta, tb, kind, q, "transition");
    hst::write_report_csv(rs, run.file("report_state.csv"));
    hst::write_report_csv(rt, run.file("report_transition.csv"));
    if (plot) {
        hst::write_report_svg(rs, run.file("report_state.svg"));
        hst::write_report_svg(rt, run.file("report_transition.svg"));
    }
    std::ofstream maps(run.file("activation_maps.csv"));
    maps.precision(17);
    maps << "token";
    for (Eigen::Index c = 0; c < ds.records.front().rois(); ++c) maps << ",roi_" << c;
    maps << "\n";
    for (int k = 0; k < Ks; ++k) {
        auto m = hst::state_activation_map(inputs, streams.state, k);
        if (!m) continue;
        maps << k;
        for (Eigen::Index c = 0; c < m->size(); ++c) maps << "," << (*m)(c);
        maps << "\n";
    }
    int flagged = 0;
    for (const auto* r : {&rs, &rt})
        for (const auto& t : r->tokens) flagged += t.significant;
    std::cout << flagged << " tokens significant after FDR correction\n";
    return 0;
}

int cmd_sweep_k(RunDir& run, const std::string& manifest, const ModelFlags& flags, const std::vector<int>& grid, json& cfg_out) {
    auto ds = load(manifest);
    auto [m, t] = flags.resolve(static_cast<int>(ds.records.front().rois()));
    cfg_out = config_json(m, t);
    cfg_out["grid"] = grid;
    warn_short(ds.records, m.window);
    const auto data = hst::make_windows(ds.records, t.windows);
    std::ofstream out(run.file("sweep.csv"));
    out.precision(17);
    out << "K,pearson_r,mse,state_perplexity,transition_perplexity,state_dead,transition_dead\n";
    for (int K : grid) {
        auto mk = m;
        mk.quant.state_codes = mk.quant.transition_codes = mk.quant.state_residual_codes = mk.quant.transition_residual_codes = K;
        hst::HstModel model(mk, t.seed);
        JsonLines log(run.file("metrics_K" + std::to_string(K) + ".jsonl"));
        hst::train_tokenizer(model, data, t, [&](const std::string& l) { log(l); });
        auto rec = hst::reconstruction_metrics(model, data.windows);
        std::vector<int> st, tt;
        for (const auto& tk : model.tokenize(data.windows)) {
            st.insert(st.end(), tk.state_tokens.begin(), tk.state_tokens.end());
            tt.insert(tt.end(), tk.transition_tokens.begin(), tk.transition_tokens.end());
        }
        auto ms = hst::codebook_metrics(st, K), mt = hst::codebook_metrics(tt, K);
        out << K << "," << rec.pearson_r << "," << rec.mse << "," << ms.perplexity << "," << mt.perplexity << "," << ms.dead_codes
            << "," << mt.dead_codes << "\n";
        out.flush();
        std::cout << "K=" << K << " r=" << rec.pearson_r << " mse=" << rec.mse << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical state/transition tokenizer for multivariate time series"};
    app.set_version_flag("--version", hst::kVersion);
    app.require_subcommand(1);
    std::string out_dir;
    app.add_option("--out", out_dir, "Output directory (default: $HST_OUTPUT_ROOT or ./runs, timestamped)");

    json args;
    std::string manifest, checkpoint, tokens_path, test = "welch";
    ModelFlags flags;
    bool save_recon = false, plot = false;
    int states = 4, rois = 16, subjects = 40, length = 400, groups = 1, folds = 5, state_codes = 0, transition_codes = 0;
    double dwell = 20.0, noise = 0.0, radius = 0.5, mean_scale = 1.0, leak = 0.02, q = 0.05;
    std::optional<double> snr;
    std::uint64_t seed = 0, cv_seed = 0;
    std::vector<int> grid{8, 16, 32, 64, 128};

    auto* synth = app.add_subcommand("synth", "Write a synthetic switching-system dataset");
    synth->add_option("--states", states, "Hidden states")->check(CLI::PositiveNumber);
    synth->add_option("--rois", rois, "Channels M")->check(CLI::PositiveNumber);
    synth->add_option("--subjects", subjects, "Subjects")->check(CLI::PositiveNumber);
    synth->add_option("--length", length, "Time points per subject")->check(CLI::PositiveNumber);
    synth->add_option("--dwell", dwell, "Mean dwell time");
    synth->add_option("--noise", noise, "Process noise standard deviation");
    synth->add_option("--snr", snr, "Observation noise SNR in dB");
    synth->add_option("--seed", seed, "Random seed");
    synth->add_option("--groups", groups, "1, or 2 for groups differing in transition matrix");
    synth->add_option("--radius", radius, "Spectral radius of the state dynamics");
    synth->add_option("--mean-scale", mean_scale, "Scale of the state means");
    synth->add_option("--leak", leak, "Group-B probability of jumping into states >= 2");

    auto* train_tok = app.add_subcommand("train-tokenizer", "Train encoder, backbone, codebooks and decoder");
    train_tok->add_option("--manifest", manifest, "Dataset manifest")->required();
    flags.attach(train_tok, true);

    auto* train_cls = app.add_subcommand("train-classifier", "Train the classifier with frozen codebooks");
    train_cls->add_option("--manifest", manifest, "Dataset manifest")->required();
    train_cls->add_option("--checkpoint", checkpoint, "Tokenizer checkpoint")->required();
    train_cls->add_option("--epochs", flags.epochs, "Epochs");
    train_cls->add_option("--batch", flags.batch, "Batch size");
    train_cls->add_option("--lr", flags.lr, "Adam learning rate");
    train_cls->add_option("--seed", flags.seed, "Random seed");

    auto* tokenize = app.add_subcommand("tokenize", "Emit token streams as CSV");
    tokenize->add_option("--manifest", manifest, "Dataset manifest")->required();
    tokenize->add_option("--checkpoint", checkpoint, "Tokenizer checkpoint")->required();

    auto* reconstruct = app.add_subcommand("reconstruct", "Reconstruct windows and report Pearson r and MSE");
    reconstruct->add_option("--manifest", manifest, "Dataset manifest")->required();
    reconstruct->add_option("--checkpoint", checkpoint, "Tokenizer checkpoint")->required();
    reconstruct->add_flag("--save", save_recon, "Write reconstructed matrices");

    auto* evaluate = app.add_subcommand("evaluate", "Stratified k-fold cross-validation of the two-phase pipeline");
    evaluate->add_option("--manifest", manifest, "Dataset manifest")->required();
    evaluate->add_option("--folds", folds, "Number of folds")->check(CLI::Range(2, 1000));
    evaluate->add_option("--cv-seed", cv_seed, "Fold assignment seed");
    flags.attach(evaluate, true);

    auto* analyze = app.add_subcommand("analyze", "Occupancy group comparison with FDR correction");
    analyze->add_option("--tokens", tokens_path, "Token CSV from tokenize")->required();
    analyze->add_option("--manifest", manifest, "Manifest with group labels 0/1")->required();
    analyze->add_option("--state-codes", state_codes, "State vocabulary size (default: largest token + 1)");
    analyze->add_option("--transition-codes", transition_codes, "Transition vocabulary size (default: largest token + 1)");
    analyze->add_option("--test", test, "welch | mann-whitney");
    analyze->add_option("--q", q, "FDR level");
    analyze->add_flag("--plot", plot, "Write SVG bar charts");

    auto* sweep = app.add_subcommand("sweep-k", "Train one tokenizer per codebook size and report reconstruction");
    sweep->add_option("--manifest", manifest, "Dataset manifest")->required();
    sweep->add_option("--grid", grid, "Codebook sizes")->delimiter(',');
    flags.attach(sweep, true);

    CLI11_PARSE(app, argc, argv);

    auto* sub = app.get_subcommands().front();
    for (const auto* opt : sub->get_options())
        if (opt->count() > 0 && !opt->get_lnames().empty()) {
            const auto& name = opt->get_lnames().front();
            if (name == "help") continue;
            auto res = opt->results();
            args[name] = res.size() == 1 ? json(res.front()) : json(res);
        }

    RunDir run;
    json resolved;
    try {
        run.open(sub->get_name(), out_dir);
        int rc = 0;
        const std::string name = sub->get_name();
        if (name == "synth") {
            resolved = {{"states", states}, {"rois", rois},   {"subjects", subjects}, {"length", length},
                        {"dwell", dwell},   {"noise", noise}, {"seed", seed},         {"groups", groups},
                        {"radius", radius}, {"mean_scale", mean_scale}, {"leak", leak}};
            if (snr) resolved["snr_db"] = *snr;
            rc = cmd_synth(run, states, rois, subjects, length, dwell, noise, snr, seed, groups, radius, mean_scale, leak);
        } else if (name == "train-tokenizer") {
            rc = cmd_train_tokenizer(run, manifest, flags, resolved);
        } else if (name == "train-classifier") {
            rc = cmd_train_classifier(run, manifest, checkpoint, flags, resolved);
        } else if (name == "tokenize") {
            rc = cmd_tokenize(run, manifest, checkpoint, resolved);
        } else if (name == "reconstruct") {
            rc = cmd_reconstruct(run, manifest, checkpoint, save_recon, resolved);
        } else if (name == "evaluate") {
            rc = cmd_evaluate(run, manifest, flags, folds, cv_seed, resolved);
        } else if (name == "analyze") {
            rc = cmd_analyze(run, tokens_path, manifest, state_codes, transition_codes, test, q, plot, resolved);
        } else if (name == "sweep-k") {
            rc = cmd_sweep_k(run, manifest, flags, grid, resolved);
        }
        auto rc_json = run_config(name, args);
        rc_json["resolved"] = resolved;
        write_json(run.file("run_config.json"), rc_json);
        return rc;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        run.discard();
        return 1;
    }
}
