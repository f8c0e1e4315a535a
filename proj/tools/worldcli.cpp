// worldcli - command line front end for the latticeworld shared library.
// Links against the C API only. Subcommands: gen-data, train,
// finetune-enhancer, finetune-decoder, sample, optimize-init, enhance, eval,
// render. Each accepts --config FILE with `key = value` lines (same names as
// the long flags, flags win), and logs the fully resolved configuration.
// Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical abort.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "latticeworld.h"

namespace {

int fail_status(lw_status status) {
    std::fprintf(stderr, "error: %s\n", lw_last_error());
    return static_cast<int>(status);
}

int fail_usage(const std::string& msg) {
    std::fprintf(stderr, "error: %s\n", msg.c_str());
    return 2;
}

// key = value lines; '#' starts a comment; keys match long flag names
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path,
                                                                  bool& ok) {
    std::vector<std::pair<std::string, std::string>> entries;
    std::ifstream in(path);
    ok = static_cast<bool>(in);
    if (!ok) {
        return entries;
    }
    std::string line;
    while (std::getline(in, line)) {
        size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        auto trim = [](std::string s) {
            size_t b = s.find_first_not_of(" \t\r");
            size_t e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (!key.empty()) {
            entries.emplace_back(key, value);
        }
    }
    return entries;
}

struct LoggedOption {
    std::string name;
    std::function<std::string()> value;
};

struct Cli {
    CLI::App app{"latticeworld command line"};
    std::map<const CLI::App*, std::vector<LoggedOption>> logged;
    std::string config_path;

    Cli() {
        app.require_subcommand(1);
        app.set_version_flag("--version", std::string(lw_version()));
    }

    CLI::App* sub(const std::string& name, const std::string& desc) {
        CLI::App* s = app.add_subcommand(name, desc);
        s->add_option("--config", config_path, "key = value config file");
        return s;
    }

    template <typename T>
    void opt(CLI::App* s, const std::string& flag, T& value, const std::string& desc) {
        s->add_option(flag, value, desc)->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
        std::string name = flag.substr(2);
        logged[s].push_back({name, [&value] {
                                 std::ostringstream ss;
                                 if constexpr (std::is_same_v<T, std::vector<uint32_t>>) {
                                     for (size_t i = 0; i < value.size(); ++i) {
                                         ss << (i ? "," : "") << value[i];
                                     }
                                 } else {
                                     ss << value;
                                 }
                                 return ss.str();
                             }});
    }

    void flag(CLI::App* s, const std::string& name, bool& value, const std::string& desc) {
        s->add_flag(name, value, desc);
        logged[s].push_back(
            {name.substr(2), [&value] { return std::string(value ? "1" : "0"); }});
    }

    void log_resolved(const CLI::App* s) {
        std::printf("resolved config (%s):\n", s->get_name().c_str());
        for (const LoggedOption& o : logged[s]) {
            std::printf("  %s = %s\n", o.name.c_str(), o.value().c_str());
        }
        std::fflush(stdout);
    }
};

struct SegmapHandle {
    lw_segmap* map = nullptr;
    ~SegmapHandle() { lw_segmap_free(map); }
};

struct ModelHandle {
    lw_model* model = nullptr;
    ~ModelHandle() { lw_model_free(model); }
};

struct VolumeHandle {
    lw_volume* volume = nullptr;
    ~VolumeHandle() { lw_volume_free(volume); }
};

}  // namespace

int main(int argc, char** argv) {
    Cli cli;

    // shared values
    uint64_t seed = 0;
    uint32_t threads = 1;
    std::string out_dir = "out";
    std::string data_dir;
    std::string model_path;
    std::string map_path, prompts_path;
    std::string world_path;
    std::string reference_csv;

    auto add_common = [&](CLI::App* s) {
        cli.opt(s, "--seed", seed, "run seed");
        cli.opt(s, "--threads", threads, "worker thread cap (does not affect results)");
        cli.opt(s, "--out-dir", out_dir, "output directory");
    };

    // gen-data
    lw_gen_params gen = lw_gen_params_default();
    CLI::App* s_gen = cli.sub("gen-data", "generate synthetic label-conditional voxel scenes");
    add_common(s_gen);
    cli.opt(s_gen, "--count", gen.count, "number of scenes");
    cli.opt(s_gen, "--scene-d", gen.scene_d, "scene depth (z / vertical)");
    cli.opt(s_gen, "--scene-h", gen.scene_h, "scene height (y)");
    cli.opt(s_gen, "--scene-w", gen.scene_w, "scene width (x)");

    // train
    lw_train_params train = lw_train_params_default();
    CLI::App* s_train = cli.sub("train", "train the two-stage toy flow model from scratch");
    add_common(s_train);
    cli.opt(s_train, "--data", data_dir, "gen-data directory");
    cli.opt(s_train, "--channels", train.channels, "latent channels");
    cli.opt(s_train, "--emb-dim", train.emb_dim, "label embedding width");
    cli.opt(s_train, "--hidden", train.hidden, "hidden layer width");
    cli.opt(s_train, "--patch-radius", train.patch_radius, "neighborhood radius");
    cli.opt(s_train, "--num-labels", train.num_labels, "label vocabulary size");
    cli.opt(s_train, "--native", train.native, "native cube edge");
    cli.opt(s_train, "--steps", train.steps, "SGD steps per stage");
    cli.opt(s_train, "--lr", train.lr, "learning rate");
    cli.opt(s_train, "--batch", train.batch, "voxels per step");
    cli.opt(s_train, "--crops-per-scene", train.crops_per_scene, "training crops per scene");

    // finetune-enhancer
    lw_enhtrain_params enh = lw_enhtrain_params_default();
    std::vector<uint32_t> crop_sizes;
    CLI::App* s_enh = cli.sub("finetune-enhancer", "fine-tune the detail enhancer mixer layer");
    add_common(s_enh);
    cli.opt(s_enh, "--model", model_path, "input checkpoint");
    cli.opt(s_enh, "--data", data_dir, "gen-data directory");
    cli.opt(s_enh, "--lattice", enh.lattice, "pair lattice resolution");
    cli.opt(s_enh, "--crop-sizes", crop_sizes, "metric crop edges (comma separated)");
    cli.opt(s_enh, "--per-scene", enh.per_scene, "pairs per scene");
    cli.opt(s_enh, "--min-content", enh.min_content, "min active cells per cube");
    cli.opt(s_enh, "--steps", enh.steps, "fine-tuning steps");
    cli.opt(s_enh, "--lr", enh.lr, "learning rate");
    cli.opt(s_enh, "--batch", enh.batch, "target positions per step");
    cli.opt(s_enh, "--adjacent-max", enh.adjacent_max, "max adjacent cubes during training");
    s_enh->get_option("--crop-sizes")->delimiter(',');

    // finetune-decoder
    lw_dectrain_params dec = lw_dectrain_params_default();
    CLI::App* s_dec = cli.sub("finetune-decoder", "fine-tune the appearance decoder");
    add_common(s_dec);
    cli.opt(s_dec, "--model", model_path, "input checkpoint");
    cli.opt(s_dec, "--data", data_dir, "gen-data directory");
    cli.opt(s_dec, "--steps", dec.steps, "SGD steps");
    cli.opt(s_dec, "--lr", dec.lr, "learning rate");
    cli.opt(s_dec, "--crops-per-scene", dec.crops_per_scene, "crops per scene");

    // sample
    lw_sample_params sample = lw_sample_params_default();
    bool plain = false;
    CLI::App* s_sample = cli.sub("sample", "generate a world from a segment map");
    add_common(s_sample);
    cli.opt(s_sample, "--model", model_path, "checkpoint");
    cli.opt(s_sample, "--map", map_path, "label raster (PGM P5 or text grid)");
    cli.opt(s_sample, "--prompts", prompts_path, "prompt table (label_id=prompt)");
    cli.opt(s_sample, "--dims-d", sample.dims_d, "world depth (z)");
    cli.opt(s_sample, "--dims-h", sample.dims_h, "world height (y)");
    cli.opt(s_sample, "--dims-w", sample.dims_w, "world width (x)");
    cli.opt(s_sample, "--steps", sample.steps, "Euler steps");
    cli.opt(s_sample, "--window", sample.window, "fusion window size");
    cli.opt(s_sample, "--stride", sample.stride, "fusion window stride");
    cli.opt(s_sample, "--kernel-sigma", sample.kernel_sigma, "fusion kernel sigma (0: window/4)");
    cli.opt(s_sample, "--sigma-max", sample.sigma_max, "mask blur at t=1");
    cli.flag(s_sample, "--plain", plain, "bypass window fusion (single-label maps)");

    // optimize-init
    lw_initopt_params opt = lw_initopt_params_default();
    std::string parameterization = "spectral";
    CLI::App* s_opt = cli.sub("optimize-init", "scale-aware initial latent optimization");
    add_common(s_opt);
    cli.opt(s_opt, "--model", model_path, "checkpoint");
    cli.opt(s_opt, "--lr", opt.lr, "learning rate");
    cli.opt(s_opt, "--max-steps", opt.max_steps, "optimization step budget");
    cli.opt(s_opt, "--parameterization", parameterization, "spectral | direct");
    cli.opt(s_opt, "--dice-stop", opt.dice_stop, "stop when Dice reaches this value");
    cli.opt(s_opt, "--spike-ratio", opt.spike_ratio, "abort on loss growth beyond this ratio");
    cli.opt(s_opt, "--ground-frac", opt.ground_frac, "target ground slab height fraction");
    cli.opt(s_opt, "--exclude-frac", opt.exclude_frac, "excluded region start fraction");
    cli.opt(s_opt, "--amplitude", opt.amplitude, "target magnitude");
    cli.opt(s_opt, "--label", opt.label, "condition label");
    cli.opt(s_opt, "--sample-steps", opt.sample_steps, "Euler steps inside the denoising pass");
    cli.opt(s_opt, "--cube", opt.cube, "latent cube edge (0: model native)");

    // enhance
    lw_enhance_params enhp = lw_enhance_params_default();
    CLI::App* s_enhance = cli.sub("enhance", "apply the detail enhancer to a world");
    add_common(s_enhance);
    cli.opt(s_enhance, "--model", model_path, "checkpoint");
    cli.opt(s_enhance, "--world", world_path, "input sparse world volume");
    cli.opt(s_enhance, "--map", map_path, "optional label raster for per-tile labels");
    cli.opt(s_enhance, "--prompts", prompts_path, "prompt table for --map");
    cli.opt(s_enhance, "--levels", enhp.levels, "enhancement rounds (x2 resolution each)");
    cli.opt(s_enhance, "--tile", enhp.tile, "parent cube edge");
    cli.opt(s_enhance, "--steps", enhp.steps, "Euler steps per octant");
    cli.opt(s_enhance, "--adjacent-limit", enhp.adjacent_limit, "max adjacent cubes");
    cli.opt(s_enhance, "--label", enhp.label, "fallback condition label");

    // eval
    lw_eval_params eval = lw_eval_params_default();
    std::string stat_name = "height";
    CLI::App* s_eval = cli.sub("eval", "seam, region and normalization diagnostics");
    add_common(s_eval);
    cli.opt(s_eval, "--world", world_path, "world volume (dense or sparse)");
    cli.opt(s_eval, "--map", map_path, "label raster for region stats");
    cli.opt(s_eval, "--prompts", prompts_path, "prompt table for --map");
    cli.opt(s_eval, "--window", eval.window, "window size for seam planes / probe");
    cli.opt(s_eval, "--stride", eval.stride, "window stride");
    cli.opt(s_eval, "--kernel-sigma", eval.kernel_sigma, "fusion kernel sigma for the probe");
    cli.opt(s_eval, "--mask-sigma", eval.mask_sigma, "mask blur for the segment probe");
    cli.opt(s_eval, "--stat", stat_name, "region statistic: height | norm");
    cli.opt(s_eval, "--reference", reference_csv, "reference regions.csv for deviations");

    // render
    CLI::App* s_render = cli.sub("render", "top and side view projections of a world");
    add_common(s_render);
    cli.opt(s_render, "--model", model_path, "checkpoint (for the appearance decoder)");
    cli.opt(s_render, "--world", world_path, "sparse world volume");

    // ---- config file pre-pass: inject config entries before the real flags
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config_file;
    for (size_t i = 0; i + 1 < args.size(); ++i) {
        if (args[i] == "--config") {
            config_file = args[i + 1];
        }
    }
    if (!config_file.empty() && !args.empty()) {
        bool ok = false;
        auto entries = read_config_file(config_file, ok);
        if (!ok) {
            std::fprintf(stderr, "error: cannot open config file %s\n", config_file.c_str());
            return 3;
        }
        std::vector<std::string> merged;
        merged.push_back(args[0]);  // subcommand name
        for (const auto& [key, value] : entries) {
            merged.push_back("--" + key);
            merged.push_back(value);
        }
        merged.insert(merged.end(), args.begin() + 1, args.end());
        args = std::move(merged);
    }

    try {
        std::vector<const char*> cargs;
        cargs.push_back(argv[0]);
        for (const std::string& a : args) {
            cargs.push_back(a.c_str());
        }
        cli.app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return cli.app.exit(e);  // --help / --version
        }
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }

    CLI::App* active = cli.app.get_subcommands().front();
    cli.log_resolved(active);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        std::fprintf(stderr, "error: cannot create output directory %s\n", out_dir.c_str());
        return 3;
    }

    if (active == s_gen) {
        lw_status st = lw_gen_scenes(&gen, out_dir.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_train) {
        if (data_dir.empty()) {
            return fail_usage("train: --data is required");
        }
        train.seed = seed;
        train.threads = threads;
        lw_status st = lw_train(data_dir.c_str(), &train, out_dir.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_enh) {
        if (model_path.empty() || data_dir.empty()) {
            return fail_usage("finetune-enhancer: --model and --data are required");
        }
        if (!crop_sizes.empty()) {
            enh.crop_size_count = 0;
            for (uint32_t v : crop_sizes) {
                if (enh.crop_size_count < 8) {
                    enh.crop_sizes[enh.crop_size_count++] = v;
                }
            }
        }
        enh.seed = seed;
        enh.threads = threads;
        lw_status st = lw_finetune_enhancer(model_path.c_str(), data_dir.c_str(), &enh,
                                            out_dir.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_dec) {
        if (model_path.empty() || data_dir.empty()) {
            return fail_usage("finetune-decoder: --model and --data are required");
        }
        dec.seed = seed;
        lw_status st =
            lw_finetune_decoder(model_path.c_str(), data_dir.c_str(), &dec, out_dir.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_sample) {
        if (model_path.empty() || map_path.empty() || prompts_path.empty()) {
            return fail_usage("sample: --model, --map and --prompts are required");
        }
        ModelHandle model;
        model.model = lw_model_load(model_path.c_str());
        if (model.model == nullptr) {
            return fail_status(LW_E_DATA);
        }
        SegmapHandle map;
        map.map = lw_segmap_load(map_path.c_str(), prompts_path.c_str());
        if (map.map == nullptr) {
            return fail_status(LW_E_DATA);
        }
        sample.seed = seed;
        sample.threads = threads;
        sample.plain = plain ? 1 : 0;
        lw_status st = lw_sample(model.model, map.map, &sample, out_dir.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_opt) {
        if (model_path.empty()) {
            return fail_usage("optimize-init: --model is required");
        }
        if (parameterization != "spectral" && parameterization != "direct") {
            return fail_usage("optimize-init: --parameterization must be spectral or direct");
        }
        ModelHandle model;
        model.model = lw_model_load(model_path.c_str());
        if (model.model == nullptr) {
            return fail_status(LW_E_DATA);
        }
        opt.spectral = parameterization == "spectral" ? 1 : 0;
        opt.seed = seed;
        opt.threads = threads;
        lw_status st = lw_optimize_init(model.model, &opt, out_dir.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_enhance) {
        if (model_path.empty() || world_path.empty()) {
            return fail_usage("enhance: --model and --world are required");
        }
        ModelHandle model;
        model.model = lw_model_load(model_path.c_str());
        if (model.model == nullptr) {
            return fail_status(LW_E_DATA);
        }
        VolumeHandle world;
        world.volume = lw_volume_load(world_path.c_str());
        if (world.volume == nullptr) {
            return fail_status(LW_E_DATA);
        }
        SegmapHandle map;
        if (!map_path.empty()) {
            if (prompts_path.empty()) {
                return fail_usage("enhance: --map needs --prompts");
            }
            map.map = lw_segmap_load(map_path.c_str(), prompts_path.c_str());
            if (map.map == nullptr) {
                return fail_status(LW_E_DATA);
            }
        }
        enhp.seed = seed;
        enhp.threads = threads;
        lw_volume* out = nullptr;
        lw_status st = lw_enhance(model.model, world.volume, map.map, &enhp, &out);
        if (st != LW_OK) {
            return fail_status(st);
        }
        VolumeHandle enhanced;
        enhanced.volume = out;
        std::string path = out_dir + "/enhanced.lwvx";
        st = lw_volume_save(out, path.c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_eval) {
        if (world_path.empty()) {
            return fail_usage("eval: --world is required");
        }
        VolumeHandle world;
        world.volume = lw_volume_load(world_path.c_str());
        if (world.volume == nullptr) {
            return fail_status(LW_E_DATA);
        }
        if (stat_name != "height" && stat_name != "norm") {
            return fail_usage("eval: --stat must be height or norm");
        }
        eval.stat_kind = stat_name == "norm" ? 1 : 0;
        eval.seed = seed;
        lw_status st = lw_eval_seam(world.volume, &eval,
                                    (out_dir + "/seam.csv").c_str(), nullptr);
        if (st != LW_OK) {
            return fail_status(st);
        }
        SegmapHandle map;
        if (!map_path.empty()) {
            if (prompts_path.empty()) {
                return fail_usage("eval: --map needs --prompts");
            }
            map.map = lw_segmap_load(map_path.c_str(), prompts_path.c_str());
            if (map.map == nullptr) {
                return fail_status(LW_E_DATA);
            }
            st = lw_eval_region(world.volume, map.map, &eval,
                                reference_csv.empty() ? nullptr : reference_csv.c_str(),
                                (out_dir + "/regions.csv").c_str());
            if (st != LW_OK) {
                return fail_status(st);
            }
        }
        uint32_t dims[4];
        lw_volume_dims(world.volume, dims);
        st = lw_eval_probe(dims[0], dims[1], dims[2], map.map, &eval,
                           (out_dir + "/probe.txt").c_str(), nullptr);
        return st == LW_OK ? 0 : fail_status(st);
    }

    if (active == s_render) {
        if (model_path.empty() || world_path.empty()) {
            return fail_usage("render: --model and --world are required");
        }
        ModelHandle model;
        model.model = lw_model_load(model_path.c_str());
        if (model.model == nullptr) {
            return fail_status(LW_E_DATA);
        }
        VolumeHandle world;
        world.volume = lw_volume_load(world_path.c_str());
        if (world.volume == nullptr) {
            return fail_status(LW_E_DATA);
        }
        lw_status st = lw_render(model.model, world.volume, (out_dir + "/top.ppm").c_str(),
                                 (out_dir + "/side.ppm").c_str());
        return st == LW_OK ? 0 : fail_status(st);
    }

    return fail_usage("unknown subcommand");
}
