// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace {

namespace fs = std::filesystem;

std::string g_binary;
fs::path g_dir;

struct RunResult {
    int exit_code;
    std::string stdout_text;
};

RunResult run_cli(const std::string& args) {
    const fs::path out_file = g_dir / "stdout.txt";
    const std::string cmd =
        g_binary + " " + args + " > " + out_file.string() + " 2> /dev/null";
    const int status = std::system(cmd.c_str());
    RunResult result;
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out_file);
    std::stringstream buf;
    buf << in.rdbuf();
    result.stdout_text = buf.str();
    return result;
}

int64_t count_lines(const std::string& text) {
    int64_t lines = 0;
    for (const char c : text) {
        lines += c == '\n';
    }
    return lines;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run_cli("").exit_code, 2);
    EXPECT_EQ(run_cli("bogus-subcommand").exit_code, 2);
    EXPECT_EQ(run_cli("mask-dump").exit_code, 2);  // missing required --T
    EXPECT_EQ(run_cli("train --pattern wedge").exit_code, 2);
}

TEST(Cli, DataErrorsExitOne) {
    EXPECT_EQ(run_cli("mask-dump --T 63 --ratio 4").exit_code, 1);  // not divisible
    EXPECT_EQ(run_cli("eval-boundary --checkpoint /nonexistent/ckpt").exit_code, 1);
    EXPECT_EQ(run_cli("generate --checkpoint /nonexistent/ckpt --prompt 1,2").exit_code, 1);
}

TEST(Cli, MaskDumpDimensions) {
    // T=64, r=4, s=4: T' = 4 + 64 + 16 = 84
    const RunResult r = run_cli("mask-dump --T 64 --ratio 4 --sink-count 4 --window-units 1");
    ASSERT_EQ(r.exit_code, 0);
    std::istringstream in(r.stdout_text);
    std::string magic;
    int64_t w = 0, h = 0;
    in >> magic >> w >> h;
    EXPECT_EQ(magic, "P1");
    EXPECT_EQ(w, 84);
    EXPECT_EQ(h, 84);

    const RunResult chunk =
        run_cli("mask-dump --T 64 --ratio 4 --pattern chunk --chunk-len 16");
    ASSERT_EQ(chunk.exit_code, 0);
    std::istringstream cin_(chunk.stdout_text);
    cin_ >> magic >> w >> h;
    EXPECT_EQ(w, 80);  // no sinks in the baseline: 64 + 16
    EXPECT_EQ(h, 80);
}

TEST(Cli, BenchEmitsOneRowPerCombination) {
    const RunResult r = run_cli("bench --lengths 16384,131072 --ratios 4,8");
    ASSERT_EQ(r.exit_code, 0);
    EXPECT_EQ(count_lines(r.stdout_text), 1 + 8);  // header + 2x2x2 rows
    EXPECT_NE(r.stdout_text.find("T,ratio,direction"), std::string::npos);
}

TEST(Cli, TrainEvalGenerateRoundTrip) {
    const std::string ckpt = (g_dir / "smoke").string();
    const std::string loss_csv = (g_dir / "loss.csv").string();
    const RunResult train = run_cli(
        "train --task char_lm --steps 3 --batch 1 --seq-len 64 --vocab 32 --layers 1 --heads 2 "
        "--head-dim 8 --ratio 4 --sink-count 2 --window-units 1 --block-size 8 --seed 3 "
        "--out " + ckpt + " --loss-csv " + loss_csv);
    ASSERT_EQ(train.exit_code, 0);
    EXPECT_TRUE(fs::exists(ckpt + ".json"));
    EXPECT_TRUE(fs::exists(ckpt + ".bin"));
    std::ifstream loss(loss_csv);
    std::string header;
    std::getline(loss, header);
    EXPECT_EQ(header, "step,mean_ce,grad_norm");
    EXPECT_EQ(count_lines(std::string((std::istreambuf_iterator<char>(loss)),
                                      std::istreambuf_iterator<char>())),
              3);

    const RunResult eval = run_cli("eval-boundary --checkpoint " + ckpt +
                                   " --chunk-len 16 --sequences 2 --seq-len 64");
    ASSERT_EQ(eval.exit_code, 0);
    EXPECT_NE(eval.stdout_text.find("rel_pos,mean_ce,count"), std::string::npos);
    EXPECT_EQ(count_lines(eval.stdout_text), 1 + 16);

    const std::string trace_csv = (g_dir / "trace.csv").string();
    const RunResult gen = run_cli("generate --checkpoint " + ckpt +
                                  " --prompt 1,2,3,4,5,6,7,8 --max-new 6 --trace " + trace_csv);
    ASSERT_EQ(gen.exit_code, 0);
    EXPECT_EQ(count_lines(gen.stdout_text), 6);  // newline-delimited token ids
    std::istringstream tokens(gen.stdout_text);
    int64_t tok;
    while (tokens >> tok) {
        EXPECT_GE(tok, 0);
        EXPECT_LT(tok, 32);
    }
    std::ifstream trace(trace_csv);
    std::getline(trace, header);
    EXPECT_EQ(header, "step,layer,sinks,gists,raws");

    const RunResult stats = run_cli("attn-stats --checkpoint " + ckpt +
                                    " --chunk-len 16 --sequences 1 --seq-len 64");
    ASSERT_EQ(stats.exit_code, 0);
    EXPECT_NE(stats.stdout_text.find("layer,cross_chunk_mass"), std::string::npos);
}

TEST(Cli, GenerateRejectsChunkCheckpoints) {
    const std::string ckpt = (g_dir / "chunk_ckpt").string();
    const RunResult train = run_cli(
        "train --task char_lm --pattern chunk --chunk-len 16 --steps 2 --batch 1 --seq-len 64 "
        "--vocab 32 --layers 1 --heads 2 --head-dim 8 --ratio 4 --block-size 8 --mode oracle "
        "--out " + ckpt);
    ASSERT_EQ(train.exit_code, 0);
    EXPECT_EQ(run_cli("generate --checkpoint " + ckpt + " --prompt 1,2,3,4").exit_code, 1);
}

TEST(Cli, ConfigFileDrivesTraining) {
    const std::string config = (g_dir / "config.json").string();
    {
        std::ofstream out(config);
        out << R"({"ratio": 4, "sink_count": 2, "window_units": 1, "block_size": 8,
                   "model": {"layers": 1, "heads": 2, "head_dim": 8, "hidden_mult": 2,
                             "vocab": 32, "rope_theta": 10000.0, "seed": 7},
                   "train": {"lr": 0.002, "warmup_steps": 2}})";
    }
    const std::string ckpt = (g_dir / "from_config").string();
    const RunResult train = run_cli("train --config " + config +
                                    " --task copy --steps 2 --batch 1 --seq-len 32 --out " + ckpt);
    ASSERT_EQ(train.exit_code, 0);
    EXPECT_TRUE(fs::exists(ckpt + ".json"));

    const std::string bad = (g_dir / "bad_config.json").string();
    {
        std::ofstream out(bad);
        out << R"({"ratio": 4, "mystery": 1})";
    }
    EXPECT_EQ(run_cli("train --config " + bad + " --steps 1").exit_code, 1);
}

int main(int argc, char** argv) {
    ::testing::InitGoogleTest(&argc, argv);
    if (argc < 2) {
        std::fprintf(stderr, "usage: test_cli <path-to-gistlm-binary>\n");
        return 1;
    }
    g_binary = argv[1];
    g_dir = fs::temp_directory_path() / "gistlm_cli_test";
    fs::create_directories(g_dir);
    const int result = RUN_ALL_TESTS();
    fs::remove_all(g_dir);
    return result;
}
