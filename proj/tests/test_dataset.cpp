#include <doctest.h>

#include "tfdpm/dataset.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace tfdpm;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream f(path);
    f << content;
    return path.string();
}

std::vector<ChannelSpec> two_cont_specs() {
    return {{"a", ChannelSpec::Kind::Continuous, 0}, {"b", ChannelSpec::Kind::Continuous, 0}};
}

}  // namespace

TEST_CASE("min-max normalisation") {
    Matrix raw(3, 1);
    raw << 0, 5, 10;
    auto [normed, stats] = normalize(raw);
    CHECK(normed(0, 0) == doctest::Approx(0.0));
    CHECK(normed(1, 0) == doctest::Approx(0.5));
    CHECK(normed(2, 0) == doctest::Approx(1.0));
    CHECK(stats[0].first == 0.0);
    CHECK(stats[0].second == 10.0);

    // already normalised data with its own stats stays put
    NormStats unit = {{0.0, 1.0}};
    Matrix in(2, 1);
    in << 0, 1;
    auto [same, s2] = normalize(in, &unit);
    CHECK(same == in);

    // training stats applied to test data may leave [0,1]
    NormStats train_stats = {{0.0, 10.0}};
    Matrix test(1, 1);
    test << 12;
    auto [ext, s3] = normalize(test, &train_stats);
    CHECK(ext(0, 0) == doctest::Approx(1.2));

    // degenerate channel maps to zero
    Matrix flat(3, 1);
    flat << 5, 5, 5;
    auto [z, s4] = normalize(flat);
    CHECK(z.isZero());
}

TEST_CASE("denormalize round trip") {
    Rng rng(11);
    Matrix raw = rng.normal_matrix(40, 5) * 3.0;
    raw.col(2).setConstant(7.0);  // degenerate channel
    auto [normed, stats] = normalize(raw);
    Matrix back = denormalize(normed, stats);
    for (Eigen::Index c = 0; c < raw.cols(); ++c)
        for (Eigen::Index r = 0; r < raw.rows(); ++r)
            CHECK(back(r, c) == doctest::Approx(raw(r, c)).epsilon(1e-9));
}

TEST_CASE("one-hot expansion") {
    std::vector<ChannelSpec> specs = {{"x", ChannelSpec::Kind::Continuous, 0},
                                      {"d", ChannelSpec::Kind::Discrete, 3}};
    Matrix raw(2, 2);
    raw << 0.5, 1, 0.25, 2;
    auto [out, channels] = expand_one_hot(raw, specs);
    CHECK(out.cols() == 4);
    CHECK(channels.size() == 4);
    CHECK(channels[1].name == "d#0");
    // value 1 -> [0,1,0]
    CHECK(out(0, 1) == 0.0);
    CHECK(out(0, 2) == 1.0);
    CHECK(out(0, 3) == 0.0);

    // rows of each expanded group sum to one
    Rng rng(3);
    Matrix raw2(50, 2);
    for (int r = 0; r < 50; ++r) {
        raw2(r, 0) = rng.normal();
        raw2(r, 1) = static_cast<double>(rng.uniform_int(0, 2));
    }
    auto [out2, ch2] = expand_one_hot(raw2, specs);
    for (int r = 0; r < 50; ++r)
        CHECK(out2.row(r).segment(1, 3).sum() == doctest::Approx(1.0));

    // out-of-range category is a data error
    Matrix bad(1, 2);
    bad << 0.0, 3;
    CHECK_THROWS_AS(expand_one_hot(bad, specs), DataError);
}

TEST_CASE("csv loading normalises and drops missing rows") {
    const auto path = write_temp("tfdpm_load.csv", "a,b\n2,1\n4,2\n,9\n6,3\n");
    TimeSeriesDataset ds = load_dataset(path, two_cont_specs());
    REQUIRE(ds.rows() == 3);  // the row with the missing value is gone
    CHECK(ds.values(0, 0) == doctest::Approx(0.0));
    CHECK(ds.values(1, 0) == doctest::Approx(0.5));
    CHECK(ds.values(2, 0) == doctest::Approx(1.0));
    CHECK_FALSE(ds.has_labels());
}

TEST_CASE("csv loading errors") {
    // malformed number carries the line number
    const auto bad = write_temp("tfdpm_bad.csv", "a,b\n1,2\n3,zap\n");
    try {
        load_dataset(bad, two_cont_specs());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }

    // unknown column in the header
    const auto unk = write_temp("tfdpm_unknown.csv", "a,b,zz\n1,2,3\n");
    CHECK_THROWS_AS(load_dataset(unk, two_cont_specs()), DataError);

    // missing channel
    const auto mis = write_temp("tfdpm_missing.csv", "a\n1\n");
    CHECK_THROWS_AS(load_dataset(mis, two_cont_specs()), DataError);

    // wrong field count carries the line number
    const auto cnt = write_temp("tfdpm_count.csv", "a,b\n1,2\n3\n");
    CHECK_THROWS_AS(load_dataset(cnt, two_cont_specs()), DataError);
}

TEST_CASE("csv labels") {
    const auto path = write_temp("tfdpm_lab.csv", "a,b,label\n1,2,0\n3,4,1\n5,6,0\n");
    TimeSeriesDataset ds = load_dataset(path, two_cont_specs());
    REQUIRE(ds.has_labels());
    CHECK(ds.labels == std::vector<int>{0, 1, 0});

    const auto bad = write_temp("tfdpm_lab_bad.csv", "a,b,label\n1,2,7\n");
    CHECK_THROWS_AS(load_dataset(bad, two_cont_specs()), DataError);
}

TEST_CASE("sliding windows") {
    TimeSeriesDataset ds;
    ds.values = Matrix::Random(100, 3);
    CHECK(window_count(ds, 12) == 88);

    ds.values = Matrix::Random(13, 3);
    CHECK(window_count(ds, 12) == 1);
    WindowBatch wb = all_windows(ds, 12);
    CHECK(wb.batch == 1);
    CHECK(wb.time_indices[0] == 12);
    CHECK(wb.targets.row(0) == ds.values.row(12));
    CHECK(wb.histories == ds.values.topRows(12));

    ds.values = Matrix::Random(12, 3);
    CHECK_THROWS_AS(window_count(ds, 12), ConfigError);
}

TEST_CASE("window coverage reproduces the series tail") {
    Rng rng(5);
    TimeSeriesDataset ds;
    ds.values = rng.normal_matrix(60, 4);
    const Eigen::Index omega = 7;
    WindowBatch wb = all_windows(ds, omega);
    REQUIRE(wb.batch == 53);
    for (Eigen::Index b = 0; b < wb.batch; ++b) {
        const Eigen::Index t = wb.time_indices[static_cast<std::size_t>(b)];
        CHECK(wb.targets.row(b) == ds.values.row(t));
        CHECK(wb.histories.middleRows(b * omega, omega) == ds.values.middleRows(t - omega, omega));
    }
}

TEST_CASE("synthetic data is deterministic and labelled as specified") {
    SynthData a = synth_cps_raw(Scenario::Easy, 600, 500, 42);
    SynthData b = synth_cps_raw(Scenario::Easy, 600, 500, 42);
    CHECK(a.train_raw == b.train_raw);
    CHECK(a.test_raw == b.test_raw);
    CHECK(a.test_labels == b.test_labels);

    SynthData c = synth_cps_raw(Scenario::Easy, 600, 500, 43);
    CHECK(a.train_raw != c.train_raw);

    // channel mix: at least 8 continuous and 2 discrete actuators
    int cont = 0, disc = 0;
    for (const auto& s : a.specs)
        (s.kind == ChannelSpec::Kind::Continuous ? cont : disc) += 1;
    CHECK(cont >= 8);
    CHECK(disc >= 2);

    long anomalous = 0, segments = 0;
    int prev = 0;
    for (int l : a.test_labels) {
        anomalous += l;
        if (l == 1 && prev == 0) ++segments;
        prev = l;
    }
    const double ratio = static_cast<double>(anomalous) / static_cast<double>(a.test_labels.size());
    CHECK(ratio >= 0.05);
    CHECK(ratio <= 0.12);
    CHECK(segments >= 5);
}

TEST_CASE("synthetic datasets: normal-only training, test uses train stats") {
    auto [train, test] = synth_cps(Scenario::Easy, 400, 300, 7);
    CHECK(train.rows() == 400);
    CHECK(test.rows() == 300);
    CHECK(train.cols() == 12);  // 8 continuous + 2 one-hot pairs
    for (int l : train.labels) CHECK(l == 0);
    CHECK(train.values.minCoeff() >= 0.0);
    CHECK(train.values.maxCoeff() <= 1.0);
    CHECK(test.norm_stats == train.norm_stats);
    CHECK(test.has_labels());

    // anomaly ratio band holds for other sizes too
    for (Eigen::Index t : {250L, 900L}) {
        SynthData s = synth_cps_raw(Scenario::Hard, 300, t, 3);
        long anom = 0;
        for (int l : s.test_labels) anom += l;
        const double r = static_cast<double>(anom) / static_cast<double>(t);
        CHECK(r >= 0.05);
        CHECK(r <= 0.12);
    }
}

TEST_CASE("schema round trip") {
    auto specs = synth_cps_raw(Scenario::Easy, 300, 300, 1).specs;
    const auto path = (std::filesystem::temp_directory_path() / "tfdpm_schema.json").string();
    write_schema(path, specs);
    auto back = read_schema(path);
    REQUIRE(back.size() == specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        CHECK(back[i].name == specs[i].name);
        CHECK(back[i].kind == specs[i].kind);
        CHECK(back[i].cardinality == specs[i].cardinality);
    }
}

TEST_CASE("csv writer and loader round trip through files") {
    SynthData s = synth_cps_raw(Scenario::Easy, 250, 250, 9);
    const auto dir = std::filesystem::temp_directory_path();
    const auto train_path = (dir / "tfdpm_rt_train.csv").string();
    const auto test_path = (dir / "tfdpm_rt_test.csv").string();
    write_csv(train_path, s.train_raw, s.specs, nullptr);
    write_csv(test_path, s.test_raw, s.specs, &s.test_labels);

    TimeSeriesDataset train = load_dataset(train_path, s.specs);
    TimeSeriesDataset test = load_dataset(test_path, s.specs, &train.norm_stats);

    auto [train_x, ch] = expand_one_hot(s.train_raw, s.specs);
    auto [train_v, stats] = normalize(train_x);
    CHECK((train.values - train_v).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(test.labels == s.test_labels);
}
