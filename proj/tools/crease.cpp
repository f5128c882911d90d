// crease: experiment driver. Each subcommand reads a config (defaults
// overlaid with --config and --set), validates its inputs, writes artifacts
// and a run-log next to them.
//
// Relative paths resolve against --root, else $CREASE_ARTIFACT_ROOT, else
// the working directory.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <set>

#include "crease/config.hpp"
#include "crease/metrics.hpp"
#include "crease/mixture.hpp"
#include "crease/pairs.hpp"
#include "crease/profile.hpp"
#include "crease/sagm.hpp"

namespace fs = std::filesystem;
using namespace crease;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> overrides;
    std::string root;

    [[nodiscard]] fs::path root_dir() const {
        if (!root.empty()) return root;
        if (const char* env = std::getenv("CREASE_ARTIFACT_ROOT"); env && *env) return env;
        return fs::current_path();
    }

    [[nodiscard]] fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_absolute() ? path : root_dir() / path;
    }

    [[nodiscard]] Config config() const {
        Config c = config_file.empty() ? Config::defaults() : Config::load(resolve(config_file));
        c.apply_overrides(overrides);
        return c;
    }
};

struct Run {
    RunLog log;
    WallTimer timer;
    fs::path file;

    Run(std::string command, const Config& cfg, fs::path log_file) : file(std::move(log_file)) {
        log.command = std::move(command);
        log.seed = static_cast<std::uint64_t>(cfg.integer("seed"));
        log.config_hash = hex64(cfg.hash());
        log.extra["config"] = cfg.serialize();
    }

    void input(const fs::path& p) {
        if (!fs::exists(p)) throw ValidationError("missing input " + p.string());
        log.add_input(p);
    }

    void finish() {
        log.wall_time_s = timer.seconds();
        log.write(file);
        std::cout << "run-log: " << file.string() << "\n";
    }
};

fs::path sibling_log(const fs::path& artifact) { return artifact.parent_path() / (artifact.stem().string() + ".run.json"); }

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw ValidationError(what + " not found: " + p.string());
}

void check_bridge_schedule(const BridgeModel& m, const Config& c, const fs::path& file) {
    if (m.schedule.T != c.positive("bridge.T"))
        throw ValidationError(file.string() + " was trained with T=" + std::to_string(m.schedule.T) +
                              " but the config sets bridge.T=" + c.str("bridge.T"));
}

EpochCallback progress(const std::string& what) {
    return [what](int epoch, double loss) {
        std::cout << what << " epoch " << epoch + 1 << " loss " << loss << "\n" << std::flush;
    };
}

// ---------------------------------------------------------------------------

int gen_corpus(const Common& co, const std::string& out_dir, const std::string& split) {
    const auto cfg = co.config();
    const auto root = co.resolve(out_dir);
    Run run("gen-corpus " + split, cfg, root / "run.json");
    const auto m = make_population(cfg, split == "test");
    save_corpus(m, root);
    run.log.outputs.push_back((root / "manifest.txt").string());
    run.log.extra["subjects"] = m.subject_ids().size();
    run.log.extra["images"] = m.entries.size();
    std::cout << "wrote " << m.entries.size() << " images for " << m.subject_ids().size() << " subjects to " << root.string()
              << "\n";
    run.finish();
    return 0;
}

int make_pairs(const Common& co, const std::string& corpus_file, const std::string& out_file, std::string strategy) {
    auto cfg = co.config();
    if (!strategy.empty()) cfg.set("pairs.strategy", strategy);
    const auto strat = parse_pair_strategy(cfg.str("pairs.strategy"));
    const auto manifest_path = co.resolve(corpus_file);
    const auto out = co.resolve(out_file);
    Run run("make-pairs", cfg, sibling_log(out));
    run.input(manifest_path);
    const auto m = load_manifest(manifest_path);
    const auto records = build_pairs(m, strat, static_cast<int>(cfg.integer("pairs.aug_per_subject")),
                                     static_cast<std::uint64_t>(cfg.integer("seed")));
    // augmented targets are rendered once so the pair file is self-contained
    const auto base = out.parent_path();
    const auto aug_dir = base / (out.stem().string() + "_aug");
    std::vector<PairFileRecord> file_records;
    std::map<int, int> aug_count;
    for (const auto& r : records) {
        auto path_of = [&](const ImageRef& ref) {
            if (!ref.aug) return fs::relative(manifest_path.parent_path() / m.find(ref.subject_id, ref.pose_id).path, base).string();
            const auto rel = fs::path(std::to_string(ref.subject_id)) /
                             (std::to_string(ref.pose_id) + "_" + std::to_string(aug_count[ref.subject_id]++) + ".png");
            write_png_gray(aug_dir / rel, resolve(m, ref));
            return fs::relative(aug_dir / rel, base).string();
        };
        file_records.push_back({r.subject_id, path_of(r.source), path_of(r.target), r.kind});
    }
    write_pair_file(out, cfg.str("pairs.strategy"), file_records);
    run.log.outputs.push_back(out.string());
    run.log.extra["pairs"] = file_records.size();
    std::cout << file_records.size() << " pairs (" << cfg.str("pairs.strategy") << ") -> " << out.string() << "\n";
    run.finish();
    return 0;
}

int train_bridge_cmd(const Common& co, const std::string& pairs_file, const std::string& out_file) {
    const auto cfg = co.config();
    const auto pf = co.resolve(pairs_file);
    const auto out = co.resolve(out_file);
    Run run("train-bridge", cfg, sibling_log(out));
    run.input(pf);
    const auto records = read_pair_file(pf);
    std::vector<ImagePair> pairs;
    for (const auto& r : records) {
        const auto src = pf.parent_path() / r.source, dst = pf.parent_path() / r.target;
        require_file(src, "pair source image");
        require_file(dst, "pair target image");
        pairs.push_back({read_png_gray(dst), read_png_gray(src)});
    }
    const int size = pairs.front().x0.height();
    const auto model = train_bridge(pairs, build_bridge_schedule(cfg.positive("bridge.T")), denoiser_config(cfg, size),
                                    bridge_train_config(cfg),
                                    progress("bridge"));
    save_bridge(out, model);
    run.log.outputs.push_back(out.string());
    run.log.extra["final_loss"] = model.loss_history.back();
    run.log.extra["pairs"] = pairs.size();
    run.finish();
    return 0;
}

int sample_ss(const Common& co, const std::string& bridge_file, const std::string& corpus_file, const std::string& out_dir) {
    const auto cfg = co.config();
    const auto bf = co.resolve(bridge_file), cf = co.resolve(corpus_file), out = co.resolve(out_dir);
    Run run("sample-ss", cfg, out / "run.json");
    run.input(bf);
    run.input(cf);
    const auto bridge = load_bridge(bf);
    check_bridge_schedule(bridge, cfg, bf);
    const auto syn = sample_subject_specific(bridge, load_manifest(cf), sample_spec(cfg, 0x55ULL));
    save_synthetic(out, syn);
    std::size_t flagged = 0;
    for (const auto& e : syn.entries) flagged += e.flagged;
    run.log.outputs.push_back((out / "manifest.txt").string());
    run.log.extra["samples"] = syn.entries.size();
    run.log.extra["flagged"] = flagged;
    std::cout << syn.entries.size() << " subject-specific samples (" << flagged << " flagged) -> " << out.string() << "\n";
    run.finish();
    return 0;
}

int train_ddpm_cmd(const Common& co, const std::string& corpus_file, const std::string& out_file) {
    const auto cfg = co.config();
    const auto cf = co.resolve(corpus_file), out = co.resolve(out_file);
    Run run("train-ddpm", cfg, sibling_log(out));
    run.input(cf);
    const auto m = load_manifest(cf);
    std::vector<ImageTensor> images;
    for (const auto& e : m.entries) images.push_back(e.image);
    const auto model = train_ddpm(images, build_ddpm_schedule(cfg.positive("ddpm.T")), denoiser_config(cfg, m.image_size),
                                  ddpm_train_config(cfg),
                                  progress("ddpm"));
    save_ddpm(out, model);
    run.log.outputs.push_back(out.string());
    run.log.extra["final_loss"] = model.loss_history.back();
    run.finish();
    return 0;
}

int sample_sa(const Common& co, const std::string& ddpm_file, const std::string& bridge_file, const std::string& corpus_file,
              const std::string& out_dir, int first_id) {
    const auto cfg = co.config();
    const auto df = co.resolve(ddpm_file), cf = co.resolve(corpus_file), out = co.resolve(out_dir);
    Run run("sample-sa", cfg, out / "run.json");
    run.input(df);
    run.input(cf);
    const auto ddpm = load_ddpm(df);
    if (ddpm.schedule.T != cfg.positive("ddpm.T"))
        throw ValidationError(df.string() + " was trained with T=" + std::to_string(ddpm.schedule.T) +
                              " but the config sets ddpm.T=" + cfg.str("ddpm.T"));
    const int poses = cfg.positive("sagm.poses_per_identity");
    BridgeModel bridge;
    if (poses > 1) {
        if (bridge_file.empty()) throw ValidationError("sample-sa: --bridge is required when sagm.poses_per_identity > 1");
        const auto bf = co.resolve(bridge_file);
        run.input(bf);
        bridge = load_bridge(bf);
        check_bridge_schedule(bridge, cfg, bf);
    }
    const auto real = load_manifest(cf, false);
    const auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));
    const auto ids = sample_identities(ddpm, cfg.positive("sagm.identities"), derive_seed(seed, {0x5aULL}),
                                       cfg.positive("ddpm.sample_steps"));
    const auto syn = expand_identities(ids, bridge, poses, first_id, real.subject_ids(), sample_spec(cfg, 0x5a5aULL));
    save_synthetic(out, syn);
    run.log.outputs.push_back((out / "manifest.txt").string());
    run.log.extra["identities"] = ids.size();
    run.log.extra["samples"] = syn.entries.size();
    std::cout << ids.size() << " identities, " << syn.entries.size() << " samples -> " << out.string() << "\n";
    run.finish();
    return 0;
}

int filter_ids(const Common& co, const std::string& syn_file, const std::string& corpus_file, const std::string& verifier_file,
               const std::string& out_dir, std::optional<double> threshold) {
    const auto cfg = co.config();
    const auto sf = co.resolve(syn_file), cf = co.resolve(corpus_file), vf = co.resolve(verifier_file), out = co.resolve(out_dir);
    Run run("filter-ids", cfg, out / "run.json");
    run.input(sf);
    run.input(cf);
    run.input(vf);
    const auto syn = load_synthetic(sf);
    if (syn.kind != "sa") throw ValidationError("filter-ids expects a subject-agnostic manifest, got kind '" + syn.kind + "'");
    const auto real = load_manifest(cf);
    const auto verifier = load_verifier(vf);
    const double th = threshold ? *threshold : leak_threshold_at_fmr(verifier, real, cfg.real("sagm.leak_fmr"));
    const auto res = filter_identity_leaks(syn, real, verifier, th);
    save_synthetic(out, res.kept);
    write_leak_report(out / "leak_report.tsv", res.report);
    std::size_t removed = 0;
    for (const auto& r : res.report) removed += r.removed;
    run.log.outputs.push_back((out / "manifest.txt").string());
    run.log.outputs.push_back((out / "leak_report.tsv").string());
    run.log.extra["threshold"] = th;
    run.log.extra["removed_identities"] = removed;
    std::cout << "threshold " << th << ": removed " << removed << " of " << res.report.size() << " identities\n";
    run.finish();
    return 0;
}

int train_verifier_cmd(const Common& co, const std::string& mixture_file, const std::string& out_file) {
    const auto cfg = co.config();
    const auto mf = co.resolve(mixture_file), out = co.resolve(out_file);
    Run run("train-verifier", cfg, sibling_log(out));
    run.input(mf);
    const auto mix = load_mixture(mf);
    for (const auto& s : mix.sources) run.input(s.path);
    MixtureCounts counts;
    const auto data = build_training_set(mix, derive_seed(static_cast<std::uint64_t>(cfg.integer("seed")), {0xa117ULL}), &counts);
    if (data.images.empty()) throw ValidationError("mixture " + mf.string() + " yields no images");
    const auto model = train_verifier(data, verifier_config(cfg, data.images.front().height()), progress("verifier"));
    save_verifier(out, model);
    run.log.outputs.push_back(out.string());
    run.log.extra["images"] = {{"real", counts.real}, {"augmented", counts.augmented}, {"ss", counts.ss}, {"sa", counts.sa}};
    run.log.extra["classes"] = model.class_ids.size();
    run.log.extra["final_loss"] = model.loss_history.back();
    run.finish();
    return 0;
}

void write_report_files(const fs::path& dir, const ScoreSet& s, const Config& cfg) {
    const auto report = make_report(s, cfg.reals("eval.fmr_targets"));
    const auto text = format_report(report);
    fs::create_directories(dir);
    std::ofstream(dir / "report.txt") << text;
    write_det_csv(dir / "det.csv", det_curve(s, cfg.positive("eval.det_points")));
    std::cout << text;
}

int evaluate(const Common& co, const std::string& verifier_file, const std::string& test_file, const std::string& out_dir) {
    const auto cfg = co.config();
    const auto vf = co.resolve(verifier_file), tf = co.resolve(test_file), out = co.resolve(out_dir);
    Run run("evaluate", cfg, out / "run.json");
    run.input(vf);
    run.input(tf);
    const auto verifier = load_verifier(vf);
    const auto test = load_manifest(tf);
    const std::set<int> trained(verifier.class_ids.begin(), verifier.class_ids.end());
    for (int id : test.subject_ids())
        if (trained.count(id))
            throw ValidationError("evaluate: test subject " + std::to_string(id) +
                                  " was a training class; the test population must be disjoint");
    const int enrol = cfg.positive("eval.enrol_poses");
    std::map<int, SubjectSamples> by_subject;
    for (const auto& [sid, idx] : test.by_subject()) {
        if (static_cast<int>(idx.size()) <= enrol)
            throw ValidationError("evaluate: subject " + std::to_string(sid) + " has no probe poses beyond the " +
                                  std::to_string(enrol) + " enrolment poses");
        std::vector<ImageTensor> images;
        for (auto i : idx) images.push_back(test.entries[i].image);
        const auto emb = embed(verifier, images);
        auto& s = by_subject[sid];
        s.enrol.assign(emb.begin(), emb.begin() + enrol);
        s.probe.assign(emb.begin() + enrol, emb.end());
    }
    const auto scores = assemble_scores(by_subject);
    write_score_file(out / "scores.txt", scores);
    write_report_files(out, scores, cfg);
    for (const char* f : {"scores.txt", "report.txt", "det.csv"}) run.log.outputs.push_back((out / f).string());
    run.log.extra["eer"] = eer(scores).eer;
    run.finish();
    return 0;
}

int report(const Common& co, const std::string& scores_file, const std::string& out_dir) {
    const auto cfg = co.config();
    const auto sf = co.resolve(scores_file);
    require_file(sf, "score file");
    const auto scores = read_score_file(sf);
    const auto out = out_dir.empty() ? sf.parent_path() : co.resolve(out_dir);
    Run run("report", cfg, out / "report.run.json");
    run.input(sf);
    write_report_files(out, scores, cfg);
    run.log.outputs.push_back((out / "report.txt").string());
    run.log.outputs.push_back((out / "det.csv").string());
    run.finish();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"crease: forehead-crease synthesis and verification experiments"};
    app.require_subcommand(1);
    Common co;
    app.add_option("-c,--config", co.config_file, "config file (key = value, include <file>)");
    app.add_option("-s,--set", co.overrides, "override a config key: key=value")->take_all();
    app.add_option("--root", co.root, "artifact root (default $CREASE_ARTIFACT_ROOT or cwd)");

    std::string out, corpus, pairs, bridge, ddpm, verifier, synthetic, mixture, scores, strategy, split = "train";
    std::optional<double> threshold;
    int first_id = kSyntheticFirstId;
    std::function<int()> action;

    auto* gc = app.add_subcommand("gen-corpus", "render a procedural crease corpus");
    gc->add_option("-o,--out", out, "output directory")->required();
    gc->add_option("--split", split, "train or test (disjoint id range)")->check(CLI::IsMember({"train", "test"}));
    gc->callback([&] { action = [&] { return gen_corpus(co, out, split); }; });

    auto* mp = app.add_subcommand("make-pairs", "build bridge training pairs");
    mp->add_option("--corpus", corpus, "corpus manifest")->required();
    mp->add_option("-o,--out", out, "pair file")->required();
    mp->add_option("--strategy", strategy, "comb, permute or permute_aug (default from config)");
    mp->callback([&] { action = [&] { return make_pairs(co, corpus, out, strategy); }; });

    auto* tb = app.add_subcommand("train-bridge", "train the bridge denoiser");
    tb->add_option("--pairs", pairs, "pair file")->required();
    tb->add_option("-o,--out", out, "checkpoint")->required();
    tb->callback([&] { action = [&] { return train_bridge_cmd(co, pairs, out); }; });

    auto* ss = app.add_subcommand("sample-ss", "subject-specific sampling");
    ss->add_option("--bridge", bridge, "bridge checkpoint")->required();
    ss->add_option("--corpus", corpus, "corpus manifest")->required();
    ss->add_option("-o,--out", out, "output directory")->required();
    ss->callback([&] { action = [&] { return sample_ss(co, bridge, corpus, out); }; });

    auto* td = app.add_subcommand("train-ddpm", "train the unconditional denoiser");
    td->add_option("--corpus", corpus, "corpus manifest")->required();
    td->add_option("-o,--out", out, "checkpoint")->required();
    td->callback([&] { action = [&] { return train_ddpm_cmd(co, corpus, out); }; });

    auto* sa = app.add_subcommand("sample-sa", "subject-agnostic sampling");
    sa->add_option("--ddpm", ddpm, "unconditional checkpoint")->required();
    sa->add_option("--bridge", bridge, "bridge checkpoint for pose expansion");
    sa->add_option("--corpus", corpus, "real corpus manifest (id collision check)")->required();
    sa->add_option("--first-id", first_id, "first synthetic subject id");
    sa->add_option("-o,--out", out, "output directory")->required();
    sa->callback([&] { action = [&] { return sample_sa(co, ddpm, bridge, corpus, out, first_id); }; });

    auto* fi = app.add_subcommand("filter-ids", "remove synthetic identities too close to real ones");
    fi->add_option("--synthetic", synthetic, "subject-agnostic manifest")->required();
    fi->add_option("--corpus", corpus, "real corpus manifest")->required();
    fi->add_option("--verifier", verifier, "verifier checkpoint")->required();
    fi->add_option("--threshold", threshold, "distance threshold (default: verifier threshold at sagm.leak_fmr)");
    fi->add_option("-o,--out", out, "output directory")->required();
    fi->callback([&] { action = [&] { return filter_ids(co, synthetic, corpus, verifier, out, threshold); }; });

    auto* tv = app.add_subcommand("train-verifier", "train the verifier on a data mixture");
    tv->add_option("--mixture", mixture, "mixture file")->required();
    tv->add_option("-o,--out", out, "checkpoint")->required();
    tv->callback([&] { action = [&] { return train_verifier_cmd(co, mixture, out); }; });

    auto* ev = app.add_subcommand("evaluate", "score a held-out population");
    ev->add_option("--verifier", verifier, "verifier checkpoint")->required();
    ev->add_option("--corpus", corpus, "test corpus manifest")->required();
    ev->add_option("-o,--out", out, "output directory")->required();
    ev->callback([&] { action = [&] { return evaluate(co, verifier, corpus, out); }; });

    auto* rp = app.add_subcommand("report", "EER, TMR and DET from a score file");
    rp->add_option("--scores", scores, "score file")->required();
    rp->add_option("-o,--out", out, "output directory (default: next to the scores)");
    rp->callback([&] { action = [&] { return report(co, scores, out); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    try {
        torch::set_num_threads(static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));
        return action();
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return 3;
    }
}
