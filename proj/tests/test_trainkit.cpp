#include "hst/checkpoint.hpp"
#include "hst/trainkit.hpp"
#include "hst/version.hpp"
#include "test_support.hpp"

#include <gtest/gtest.h>

#include <fstream>

using namespace hst;
using hst::testing::random_mat;
using hst::testing::TempDir;

namespace {

HstConfig tiny_config() {
    HstConfig c;
    c.rois = 4;
    c.window = 8;
    c.encoder.layers = 1;
    c.encoder.heads = 2;
    c.ssm.hidden = 6;
    c.ssm.layers = 1;
    c.decoder.layers = 1;
    c.decoder.heads = 2;
    c.quant.state_codes = c.quant.transition_codes = 4;
    c.quant.state_residual_codes = c.quant.transition_residual_codes = 4;
    c.loss.commitment = 0.25;
    c.classifier.hidden1 = 8;
    c.classifier.hidden2 = 8;
    return c;
}

TrainConfig tiny_train(int steps, int epochs = 0) {
    TrainConfig t;
    t.phase1_steps = steps;
    t.phase2_epochs = epochs;
    t.learning_rate = 3e-3;
    t.batch_size = 4;
    t.seed = 11;
    t.windows = {8, 8};
    return t;
}

std::vector<TimeSeriesRecord> synth_records(int n, bool separable = false) {
    auto spec = make_switching_spec(3, 4, 4.0, 0.05, 2);
    std::vector<TimeSeriesRecord> out;
    for (int i = 0; i < n; ++i) {
        auto r = synth_switching_lds(spec, 32, 200 + static_cast<std::uint64_t>(i), "s" + std::to_string(i), i % 2);
        // Label 1 gets a ramp on ROI 0 that survives z-scoring.
        if (separable && r.label == 1)
            for (Eigen::Index t = 0; t < r.X.rows(); ++t) r.X(t, 0) = static_cast<double>(t % 8) * 10.0;
        out.push_back(std::move(r));
    }
    return out;
}

double loss_of(const std::string& line) { return nlohmann::json::parse(line).at("loss").at("total").get<double>(); }

}  // namespace

TEST(Windows, MakeWindowsNormalizesAndSkipsShort) {
    auto recs = synth_records(3);
    recs[1].X = recs[1].X.topRows(5).eval();
    recs[1].true_states->resize(5);
    std::vector<std::string> skipped;
    const auto ws = make_windows(recs, WindowSpec{8, 8}, &skipped);
    EXPECT_EQ(ws.size(), 8u);
    EXPECT_EQ(skipped, (std::vector<std::string>{"s1"}));
    EXPECT_EQ(ws.record[4], 2u);
    EXPECT_EQ(ws.windows[0], zscore_normalize(recs[0].X).topRows(8));
}

TEST(Sampler, VisitsEveryIndexOncePerEpoch) {
    BatchSampler s(10, 4, Rng(3));
    std::vector<int> seen(10, 0);
    for (int b = 0; b < 5; ++b)
        for (auto i : s.next()) ++seen[i];
    for (int c : seen) EXPECT_EQ(c, 2);
}

TEST(TrainTokenizer, LossDecreasesAndLogsEveryStep) {
    HstModel model(tiny_config(), 1);
    const auto data = make_windows(synth_records(8), WindowSpec{8, 8});
    auto cfg = tiny_train(60);
    const auto res = train_tokenizer(model, data, cfg);
    ASSERT_EQ(res.metrics.size(), 60u);
    double first = 0, last = 0;
    for (int i = 0; i < 5; ++i) first += loss_of(res.metrics[static_cast<std::size_t>(i)]);
    for (int i = 55; i < 60; ++i) last += loss_of(res.metrics[static_cast<std::size_t>(i)]);
    EXPECT_LT(last, first);
    const auto j = nlohmann::json::parse(res.metrics.back());
    EXPECT_EQ(j.at("step").get<long>(), 60);
    EXPECT_TRUE(j.contains("perplexity"));
}

TEST(TrainTokenizer, ZeroStepsLeaveInitialization) {
    HstModel a(tiny_config(), 5), b(tiny_config(), 5);
    const auto data = make_windows(synth_records(4), WindowSpec{8, 8});
    const auto res = train_tokenizer(a, data, tiny_train(0));
    EXPECT_EQ(res.steps, 0);
    for (const auto& [name, v] : a.params().all()) EXPECT_EQ(v.value(), b.params().at(name).value()) << name;
}

TEST(TrainTokenizer, IdenticalSeedsGiveIdenticalLogs) {
    const auto recs = synth_records(6);
    std::vector<std::string> logs[2];
    for (auto& log : logs) {
        auto ck = run_tokenizer_phase(tiny_config(), recs, tiny_train(15));
        log = ck.metrics;
    }
    EXPECT_EQ(logs[0], logs[1]);
    auto other = tiny_train(15);
    other.seed = 12;
    EXPECT_NE(run_tokenizer_phase(tiny_config(), recs, other).metrics, logs[0]);
}

TEST(TrainTokenizer, RejectsMismatchedWindows) {
    HstModel model(tiny_config(), 1);
    WindowSet ws;
    ws.windows.push_back(Mat::Zero(8, 5));
    ws.record.push_back(0);
    ws.label.push_back(0);
    EXPECT_THROW(train_tokenizer(model, ws, tiny_train(1)), ConfigError);
}

TEST(TrainClassifier, FreezesQuantizerAndDecoder) {
    const auto recs = synth_records(8, true);
    const auto tok = run_tokenizer_phase(tiny_config(), recs, tiny_train(10, 5));
    const auto cls = run_classifier_phase(tok, recs, tiny_train(10, 5));
    for (const auto& [name, m] : tok.tensors) {
        const bool frozen = name.rfind("quant.", 0) == 0 || name.rfind("decoder.", 0) == 0;
        if (frozen) EXPECT_EQ(cls.tensors.at(name), m) << name;
    }
    EXPECT_NE(cls.tensors.at("classifier.fc1.weight"), tok.tensors.at("classifier.fc1.weight"));
    EXPECT_NE(cls.tensors.at("encoder.gate_t.expand.weight"), tok.tensors.at("encoder.gate_t.expand.weight"));
    EXPECT_TRUE(cls.classifier_trained);
}

TEST(TrainClassifier, SeparableDataIsClassifiedPerSubject) {
    const auto recs = synth_records(8, true);
    auto cfg = tiny_train(10, 150);
    const auto tok = run_tokenizer_phase(tiny_config(), recs, cfg);
    const auto cls = run_classifier_phase(tok, recs, cfg);
    auto model = make_model(cls);
    for (const auto& p : predict_subjects(*model, recs, cfg.windows)) EXPECT_EQ(p.prediction, p.label) << p.subject_id;
    // Window accuracy is a running figure over the last epoch's minibatches.
    EXPECT_GE(nlohmann::json::parse(cls.metrics.back()).at("train_accuracy").get<double>(), 0.9);
}

TEST(TrainClassifier, RejectsNonBinaryLabels) {
    HstModel model(tiny_config(), 1);
    auto recs = synth_records(2);
    recs[0].label = 2;
    EXPECT_THROW(train_classifier(model, make_windows(recs, WindowSpec{8, 8}), tiny_train(1, 1)), ValidationError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir;
    const auto ck = run_tokenizer_phase(tiny_config(), synth_records(4), tiny_train(5));
    save_checkpoint(ck, dir / "a.ckpt");
    const auto back = load_checkpoint(dir / "a.ckpt");
    EXPECT_EQ(back.tensors.size(), ck.tensors.size());
    for (const auto& [name, m] : ck.tensors) EXPECT_EQ(back.tensors.at(name), m) << name;
    EXPECT_EQ(back.metrics, ck.metrics);
    EXPECT_EQ(back.step, 5u);
    EXPECT_EQ(serialize(back), serialize(ck));  // byte-identical re-save

    auto model = make_model(back);
    const auto w = make_windows(synth_records(1), WindowSpec{8, 8}).windows;
    auto original = make_model(ck);
    EXPECT_EQ(model->reconstruct(w)[0], original->reconstruct(w)[0]);
    EXPECT_EQ(model->quantizer().state().counts, original->quantizer().state().counts);
}

TEST(Checkpoint, CorruptionTruncationAndVersionAreDetected) {
    const auto ck = run_tokenizer_phase(tiny_config(), synth_records(2), tiny_train(1));
    auto bytes = serialize(ck);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 7);
    EXPECT_THROW(deserialize(truncated), ChecksumError);
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(deserialize(flipped), ChecksumError);
    auto versioned = bytes;
    versioned[8] = 99;
    EXPECT_THROW(deserialize(versioned), VersionError);
    EXPECT_THROW(deserialize(std::vector<char>(4, 'x')), ChecksumError);
}

TEST(Checkpoint, StoredConfigurationWins) {
    auto cfg = tiny_config();
    cfg.quant.state_codes = 6;
    const auto ck = run_tokenizer_phase(cfg, synth_records(2), tiny_train(1));
    auto model = make_model(ck);
    EXPECT_EQ(model->quantizer().state().size(), 6);
    EXPECT_EQ(model->config().quant.state_codes, 6);
    auto broken = ck;
    broken.tensors.erase("quant.state");
    EXPECT_THROW(make_model(broken), ValidationError);
}

TEST(Version, IsSemantic) {
    const std::string v = kVersion;
    EXPECT_EQ(std::count(v.begin(), v.end(), '.'), 2);
}
