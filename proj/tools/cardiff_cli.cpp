#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "cardiff/eval.hpp"
#include "cardiff/sampling.hpp"

using namespace cardiff;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, const std::string& out_help) {
  app->add_option("--config", c.config, "JSON configuration file");
  app->add_option("--seed", c.seed, "random seed (overrides the config)");
  app->add_option("--out", c.out, out_help)->required();
}

/// The named section of the config file, or the whole file when absent.
json load_section(const std::string& path, const std::string& section) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(geo::read_text_file(path));
  } catch (const json::exception& e) {
    throw Error(Errc::parse, path + ": " + e.what());
  }
  require(j.is_object(), Errc::parse, path + ": expected a JSON object");
  return j.contains(section) ? j.at(section) : j;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  try {
    return j.value(key, fallback);
  } catch (const json::exception& e) {
    throw Error(Errc::parse, std::string("config field ") + key + ": " + e.what());
  }
}

void write_file(const std::string& path, const std::string& text) { geo::write_text_file(path, text); }

std::string sibling(const std::string& out, const std::string& suffix) {
  std::filesystem::path p(out);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

std::vector<geo::Polyline> real_split(const data::Dataset& ds, const std::string& split) {
  std::vector<geo::Polyline> out;
  for (auto i : ds.indices(data::parse_split(split))) out.push_back(data::gps_meters(ds.records[i], ds.bbox));
  return out;
}

std::vector<geo::Polyline> generated_gps(const std::vector<pipe::GeneratedTrajectory>& v) {
  std::vector<geo::Polyline> out;
  for (const auto& t : v) out.push_back(t.gps);
  return out;
}

pipe::TrainConfig train_config(const Common& c, pipe::Stage stage) {
  json j = load_section(c.config, "train");
  j["stage"] = pipe::stage_name(stage);
  if (c.seed) j["seed"] = *c.seed;
  return pipe::TrainConfig::from_json(j);
}

void write_log(const pipe::TrainLog& log, const std::string& path) {
  write_file(path, log.csv());
  std::cerr << "metrics: " << path << '\n';
}

pipe::TrainLog progress_log() {
  pipe::TrainLog log;
  log.on_row = [](const pipe::MetricRow& r) {
    std::cerr << "epoch " << r.epoch << ' ' << r.split << " loss " << r.loss << '\n';
  };
  return log;
}

std::vector<data::Condition> read_conditions(const std::string& path) {
  json j;
  try {
    j = json::parse(geo::read_text_file(path));
  } catch (const json::exception& e) {
    throw Error(Errc::parse, path + ": " + e.what());
  }
  const json& arr = j.is_object() && j.contains("conditions") ? j.at("conditions") : j;
  require(arr.is_array(), Errc::parse, path + ": expected an array of conditions");
  std::vector<data::Condition> out;
  for (std::size_t i = 0; i < arr.size(); ++i)
    out.push_back(data::condition_from_json(arr[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

data::Dataset load_data(const std::string& path) { return data::load_dataset(path); }

geo::RoadNetwork load_net(const std::string& flag, const data::Dataset& ds) {
  const std::string path = flag.empty() ? ds.network_file : flag;
  require(!path.empty(), Errc::invalid_argument, "no road network given (--network) and none recorded in the dataset");
  return geo::load_network(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascaded hybrid diffusion trajectory generator"};
  app.require_subcommand(1);

  // gen-net
  Common net_c;
  auto* gen_net = app.add_subcommand("gen-net", "generate a grid road network");
  add_common(gen_net, net_c, "network JSON");

  // gen-data
  Common data_c;
  std::string data_net;
  auto* gen_data = app.add_subcommand("gen-data", "simulate a trajectory dataset on a network");
  add_common(gen_data, data_c, "dataset NDJSON");
  gen_data->add_option("--network", data_net, "network JSON")->required();

  // train-*
  struct TrainArgs {
    Common c;
    std::string data, network, codec, log;
  };
  TrainArgs ta[3];
  CLI::App* train_cmd[3];
  const char* names[3] = {"train-ae", "train-seg", "train-gps"};
  for (int k = 0; k < 3; ++k) {
    train_cmd[k] = app.add_subcommand(names[k], k == 0 ? "train the segment autoencoder"
                                                       : (k == 1 ? "train the segment-level denoiser"
                                                                 : "train the GPS-level denoiser"));
    add_common(train_cmd[k], ta[k].c, "checkpoint file");
    train_cmd[k]->add_option("--data", ta[k].data, "dataset NDJSON")->required();
    train_cmd[k]->add_option("--network", ta[k].network, "network JSON (default: the dataset's)");
    train_cmd[k]->add_option("--log", ta[k].log, "metrics CSV (default: <out>.metrics.csv)");
    if (k > 0) train_cmd[k]->add_option("--codec", ta[k].codec, "autoencoder checkpoint")->required();
  }

  // sample
  Common smp_c;
  std::string smp_codec, smp_seg, smp_gps, smp_data, smp_cond = "auto";
  std::size_t smp_n = 64;
  int smp_interval = 50;
  auto* sample = app.add_subcommand("sample", "generate trajectories");
  add_common(sample, smp_c, "samples JSON");
  sample->add_option("--codec", smp_codec, "autoencoder checkpoint")->required();
  sample->add_option("--seg", smp_seg, "segment-stage checkpoint")->required();
  sample->add_option("--gps", smp_gps, "GPS-stage checkpoint")->required();
  sample->add_option("--data", smp_data, "dataset NDJSON (bbox and auto conditions)")->required();
  sample->add_option("--n", smp_n, "number of trajectories")->check(CLI::PositiveNumber);
  sample->add_option("--interval", smp_interval, "reverse-process stride (1 = DDPM)");
  sample->add_option("--conditions", smp_cond, "conditions JSON file, or 'auto'");

  // eval / privacy
  Common ev_c, pv_c;
  std::string ev_samples, ev_data, ev_split = "test", pv_samples, pv_data;
  auto* evalc = app.add_subcommand("eval", "JSD metrics and histograms against real trajectories");
  add_common(evalc, ev_c, "report JSON");
  evalc->add_option("--samples", ev_samples, "samples JSON")->required();
  evalc->add_option("--data", ev_data, "dataset NDJSON")->required();
  evalc->add_option("--split", ev_split, "real split to compare against");
  auto* privacy = app.add_subcommand("privacy", "min-Hausdorff uniqueness test against the training split");
  add_common(privacy, pv_c, "summary JSON");
  privacy->add_option("--samples", pv_samples, "samples JSON")->required();
  privacy->add_option("--data", pv_data, "dataset NDJSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_net) {
      const json j = load_section(net_c.config, "network");
      const auto net = geo::generate_grid_network(get_or(j, "rows", 10), get_or(j, "cols", 10),
                                                  get_or(j, "spacing", 100.0),
                                                  net_c.seed.value_or(get_or<std::uint64_t>(j, "seed", 0)));
      geo::save_network(net, net_c.out);
      std::cerr << net.size() << " segments -> " << net_c.out << '\n';
    } else if (*gen_data) {
      const json j = load_section(data_c.config, "data");
      const auto net = geo::load_network(data_net);
      data::DatasetParams p;
      p.max_segments = get_or<std::size_t>(j, "max_segments", p.max_segments);
      p.duration_cap_s = get_or(j, "duration_cap_s", p.duration_cap_s);
      p.trip.detour_prob = get_or(j, "detour_prob", p.trip.detour_prob);
      p.trip.gps_noise_m = get_or(j, "gps_noise_m", p.trip.gps_noise_m);
      p.trip.speed_mps = get_or(j, "speed_mps", p.trip.speed_mps);
      const auto ds = data::build_dataset(net, get_or<std::size_t>(j, "trips", 5000), p,
                                          get_or<std::size_t>(j, "N", 64),
                                          data_c.seed.value_or(get_or<std::uint64_t>(j, "seed", 0)), data_net);
      data::save_dataset(ds, data_c.out);
      std::cerr << ds.records.size() << " trips -> " << data_c.out << '\n';
    } else if (*sample) {
      const auto ds = load_data(smp_data);
      const auto models = pipe::CascadeModels::from_checkpoints(
          ckpt::load_checkpoint(smp_codec), ckpt::load_checkpoint(smp_seg), ckpt::load_checkpoint(smp_gps));
      const json j = load_section(smp_c.config, "sample");
      const std::uint64_t seed = smp_c.seed.value_or(get_or<std::uint64_t>(j, "seed", 0));
      auto conds = smp_cond == "auto" ? pipe::auto_conditions(ds, smp_n, seed) : read_conditions(smp_cond);
      require(!conds.empty(), Errc::empty_set, "no conditions to sample from");
      // a conditions file is cycled to reach --n samples
      if (smp_cond != "auto")
        for (std::size_t i = conds.size(); i < smp_n; ++i) conds.push_back(conds[i % conds.size()]);
      conds.resize(smp_n);
      pipe::SampleOptions opt;
      opt.interval = smp_interval;
      opt.beam = get_or<std::size_t>(j, "beam", opt.beam);
      opt.batch = get_or<std::size_t>(j, "batch", opt.batch);
      opt.gps_clip = get_or<double>(j, "gps_clip", opt.gps_clip);
      pipe::SampleCounters counters;
      const auto out = pipe::sample_cascaded(models, conds, ds.bbox, seed, opt, &counters);
      pipe::save_samples(out, ds.bbox, smp_c.out);
      std::cerr << out.size() << " trajectories, " << counters.seg_evals << " segment and " << counters.gps_evals
                << " GPS denoiser evaluations -> " << smp_c.out << '\n';
    } else if (*evalc) {
      const auto ds = load_data(ev_data);
      const auto gen = generated_gps(pipe::load_samples(ev_samples));
      const json j = load_section(ev_c.config, "eval");
      eval::EvalOptions opt;
      opt.sd_grid = get_or(j, "sd_grid", opt.sd_grid);
      opt.od_grid = get_or(j, "od_grid", opt.od_grid);
      opt.ld_bins = get_or(j, "ld_bins", opt.ld_bins);
      opt.hist_bins = get_or(j, "hist_bins", opt.hist_bins);
      const auto report = eval::evaluate(real_split(ds, ev_split), gen, ds.bbox, opt);
      json r = report.to_json();
      r["real_split"] = ev_split;
      write_file(ev_c.out, r.dump(2) + "\n");
      write_file(sibling(ev_c.out, ".stepwise_real.csv"), eval::histogram_csv(report.step_real));
      write_file(sibling(ev_c.out, ".stepwise_gen.csv"), eval::histogram_csv(report.step_gen));
      write_file(sibling(ev_c.out, ".length_real.csv"), eval::histogram_csv(report.length_real));
      write_file(sibling(ev_c.out, ".length_gen.csv"), eval::histogram_csv(report.length_gen));
      std::cout << "jsd_sd " << report.jsd_sd << "\njsd_ld " << report.jsd_ld << "\njsd_trip " << report.jsd_trip
                << '\n';
    } else if (*privacy) {
      const auto ds = load_data(pv_data);
      const auto r = eval::uniqueness_test(generated_gps(pipe::load_samples(pv_samples)), real_split(ds, "train"));
      write_file(pv_c.out, r.summary().dump(2) + "\n");
      write_file(sibling(pv_c.out, ".cdf.csv"), r.cdf_csv());
      std::cout << "min " << r.min << "\nmedian " << r.median << '\n';
    } else {
      for (int k = 0; k < 3; ++k) {
        if (!*train_cmd[k]) continue;
        auto& a = ta[k];
        const auto stage = k == 0 ? pipe::Stage::ae : (k == 1 ? pipe::Stage::seg : pipe::Stage::gps);
        auto cfg = train_config(a.c, stage);
        const auto ds = load_data(a.data);
        const auto net = load_net(a.network, ds);
        auto log = progress_log();
        ckpt::Checkpoint out;
        if (stage == pipe::Stage::ae) {
          out = pipe::train_autoencoder(ds, net, cfg, &log);
        } else {
          const auto codec = ckpt::load_checkpoint(a.codec);
          out = pipe::train_stage(ds, net, &codec, stage, cfg, &log);
        }
        ckpt::save_checkpoint(out, a.c.out);
        write_log(log, a.log.empty() ? sibling(a.c.out, ".metrics.csv") : a.log);
        std::cerr << "checkpoint -> " << a.c.out << '\n';
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
