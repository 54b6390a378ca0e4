#include "lgf/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "lgf/alignment.hpp"
#include "lgf/csv.hpp"
#include "lgf/error.hpp"
#include "lgf/gpr.hpp"
#include "lgf/training.hpp"

namespace lgf::cli {

namespace fs = std::filesystem;

data::Split split_holdout(const data::DataSet& data, std::size_t every) {
  if (every < 2) throw ConfigError("holdout: every must be at least 2, got " + std::to_string(every));
  std::vector<std::size_t> train, test;
  for (std::size_t i = 0; i < data.rows(); ++i) (i % every == every / 2 ? test : train).push_back(i);
  if (test.empty()) throw InputError("holdout: no rows withheld from " + std::to_string(data.rows()) + " rows");
  return {data.select_rows(train), data.select_rows(test)};
}

namespace {

struct Paths {
  fs::path root;
  fs::path data() const { return root / "data"; }
  fs::path aligned() const { return root / "aligned"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path reports() const { return root / "reports"; }
  fs::path fused() const { return root / "fused"; }
};

std::string or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback.string() : given;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw InputError(what + " '" + path + "' does not exist");
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  return out;
}

// Columns `names` of a CSV as a matrix.
Eigen::MatrixXd columns(const csv::Table& t, const std::vector<std::string>& names, const std::string& source) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t c = 0; c < names.size(); ++c) {
    const std::size_t col = t.column(names[c]);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          csv::parse_number(t.rows[r].at(col), source + " data row " + std::to_string(r + 1) + ", column '" + names[c] + "'");
    }
  }
  return m;
}

bool has_column(const csv::Table& t, const std::string& name) {
  return std::find(t.header.begin(), t.header.end(), name) != t.header.end();
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

// ---- options --------------------------------------------------------------

struct Options {
  std::string out_root;
  std::uint64_t seed = 42;
  std::string schema;

  // synth
  std::string kind = "smooth";
  std::size_t n_lf = 400;
  std::size_t n_hf = 40;
  double noise = 0.0;

  // align
  std::string lf, hf;
  std::string split = "holdout";
  std::size_t holdout_every = 5;
  std::string mach_column = "Ma";
  double mach_threshold = 0.05;
  std::size_t train_blocks = 4;
  std::size_t test_blocks = 1;
  double nugget = 0.0;

  // train
  std::string aligned;
  std::vector<std::size_t> channels{32, 64, 128, 256, 512};
  std::size_t window = 112;
  std::size_t stride = 14;
  std::size_t heads = 1;
  double attention_dropout = 0.1;
  bool no_sliding_window = false;
  bool no_attention = false;
  train::TrainConfig train;

  // infer / evaluate / uq
  std::string checkpoint;
  std::string query;
  std::string pred, truth;
  std::string fused;
  double alpha = 0.05;
  std::size_t active_subset = 0;
};

data::Schema load_schema_or_default(const Options& o, const Paths& p) {
  const std::string path = or_default(o.schema, p.data() / "schema.csv");
  require_file(path, "schema");
  return data::load_schema(path);
}

std::string default_if_exists(const std::string& given, const fs::path& fallback) {
  if (!given.empty()) return given;
  return fs::is_regular_file(fallback) ? fallback.string() : std::string();
}

// ---- commands -------------------------------------------------------------

void cmd_synth(const Options& o, const Paths& p, std::ostream& out) {
  data::SyntheticConfig c;
  c.kind = data::parse_synthetic_kind(o.kind);
  c.n_lf = o.n_lf;
  c.n_hf = o.n_hf;
  c.noise = o.noise;
  c.seed = o.seed;
  const auto [lf, hf] = data::gen_synthetic(c);
  data::save_csv(lf, p.data() / "lf.csv");
  data::save_csv(hf, p.data() / "hf.csv");
  data::save_schema(lf.schema(), p.data() / "schema.csv");
  out << "synth: wrote " << lf.rows() << " LF and " << hf.rows() << " HF rows to " << p.data().string() << '\n';
}

void cmd_align(const Options& o, const Paths& p, std::ostream& out) {
  const data::Schema schema = load_schema_or_default(o, p);
  const std::string lf_path = or_default(o.lf, p.data() / "lf.csv");
  const std::string hf_path = or_default(o.hf, p.data() / "hf.csv");
  require_file(lf_path, "LF data");
  require_file(hf_path, "HF data");
  const data::DataSet lf = data::load_csv(lf_path, schema, data::Fidelity::low);
  const data::DataSet hf = data::load_csv(hf_path, schema, data::Fidelity::high);

  data::Split split;
  if (o.split == "none") {
    split.train = hf;
  } else if (o.split == "holdout") {
    split = split_holdout(hf, o.holdout_every);
  } else if (o.split == "mach-blocks") {
    data::BlockSplitConfig bc;
    bc.mach_column = o.mach_column;
    bc.threshold = o.mach_threshold;
    bc.train_blocks = o.train_blocks;
    bc.test_blocks = o.test_blocks;
    split = data::split_mach_blocks(hf, bc);
  } else {
    throw ConfigError("align: unknown split '" + o.split + "' (expected none, holdout or mach-blocks)");
  }

  kriging::KrigingConfig kc;
  kc.nugget = o.nugget;
  const auto pair = kriging::align_datasets(lf, split.train, kc);
  kriging::save_aligned_csv(pair, p.aligned() / "aligned.csv");
  data::save_csv(split.train, p.aligned() / "hf_train.csv");
  if (split.test.rows() > 0) {
    data::save_csv(split.test, p.aligned() / "hf_test.csv");
  } else {
    fs::remove(p.aligned() / "hf_test.csv");  // a stale test file would leak into infer defaults
  }
  out << "align: " << pair.rows() << " aligned rows, " << split.train.rows() << " HF train, " << split.test.rows()
      << " HF test\n";
}

net::ArchConfig arch_from(const Options& o, std::size_t d, std::size_t d_y) {
  net::ArchConfig a;
  a.channels = o.channels;
  a.window = o.window;
  a.stride = o.stride;
  a.heads = o.heads;
  a.attention_dropout = o.attention_dropout;
  a.use_sliding_window = !o.no_sliding_window;
  a.use_attention = !o.no_attention;
  a.d = d;
  a.d_y = d_y;
  a.validate();
  return a;
}

void write_metrics_header(std::ostream& out) { out << "response,prediction,n,rmse,mae,r2,r2_defined\n"; }

void write_metrics_row(std::ostream& out, const std::string& response, const std::string& prediction, std::size_t n,
                       const train::Metrics& m) {
  out << response << ',' << prediction << ',' << n << ',' << csv::format_number(m.rmse) << ','
      << csv::format_number(m.mae) << ',' << csv::format_number(m.r2) << ',' << (m.r2_defined ? 1 : 0) << '\n';
}

void cmd_train(const Options& o, const Paths& p, std::ostream& out) {
  const std::string path = or_default(o.aligned, p.aligned() / "aligned.csv");
  require_file(path, "aligned data");
  const auto pair = kriging::load_aligned_csv(path);
  const net::ArchConfig arch =
      arch_from(o, static_cast<std::size_t>(pair.states.cols() + pair.low.cols()), static_cast<std::size_t>(pair.low.cols()));
  train::TrainConfig tc = o.train;
  tc.seed = o.seed;
  const auto result = train::train(pair, arch, tc);
  net::save_checkpoint(result.model, p.checkpoints() / "model.json");
  train::save_report_csv(result.report, p.reports() / "train_report.csv");
  auto m = open_out(p.reports() / "train_metrics.csv");
  write_metrics_header(m);
  for (std::size_t r = 0; r < result.report.train_metrics.size(); ++r) {
    write_metrics_row(m, pair.response_names[r], "fused_train", pair.rows(), result.report.train_metrics[r]);
  }
  out << "train: " << result.report.epochs() << " epochs over " << result.report.windows << " windows, final loss "
      << csv::format_number(result.report.losses.back()) << (result.report.stopped_at_lr_floor ? " (lr floor reached)" : "")
      << '\n';
}

void cmd_infer(const Options& o, const Paths& p, std::ostream& out) {
  const std::string ckpt = or_default(o.checkpoint, p.checkpoints() / "model.json");
  require_file(ckpt, "checkpoint");
  net::LGFNetModel model = net::load_checkpoint(ckpt);
  const data::Schema schema = load_schema_or_default(o, p);
  const std::string lf_path = or_default(o.lf, p.data() / "lf.csv");
  require_file(lf_path, "LF data");
  const data::DataSet lf = data::load_csv(lf_path, schema, data::Fidelity::low);
  if (lf.state_names != model.state_names || lf.response_names != model.response_names) {
    throw InputError("infer: LF columns do not match the checkpoint's state/response names");
  }

  Eigen::MatrixXd extra(0, static_cast<Eigen::Index>(lf.p()));
  const std::string query = default_if_exists(o.query, p.aligned() / "hf_test.csv");
  if (!query.empty()) {
    require_file(query, "query states");
    extra = columns(csv::read_file(query), lf.state_names, query);
  }
  const auto carrier = kriging::build_carrier(lf, extra);
  const net::Fusion f = net::fuse_inference(model, carrier.states, carrier.low);

  auto file = open_out(p.fused() / "fused.csv");
  std::vector<std::string> header = lf.state_names;
  for (const auto& r : lf.response_names) {
    header.push_back(r + "_L");
    header.push_back(r + "_delta_pred");
    header.push_back(r + "_fused");
  }
  csv::write_row(file, header);
  std::vector<double> row;
  for (Eigen::Index i = 0; i < carrier.states.rows(); ++i) {
    row.clear();
    for (Eigen::Index c = 0; c < carrier.states.cols(); ++c) row.push_back(carrier.states(i, c));
    for (Eigen::Index r = 0; r < carrier.low.cols(); ++r) {
      row.push_back(carrier.low(i, r));
      row.push_back(f.delta(i, r));
      row.push_back(f.fused(i, r));
    }
    csv::write_numbers(file, row);
  }
  out << "infer: fused " << carrier.states.rows() << " rows (" << extra.rows() << " query states) into "
      << (p.fused() / "fused.csv").string() << '\n';
}

using StateKey = std::vector<double>;

std::map<StateKey, std::size_t> index_states(const Eigen::MatrixXd& states, const std::string& source) {
  std::map<StateKey, std::size_t> idx;
  for (Eigen::Index i = 0; i < states.rows(); ++i) {
    StateKey k;
    for (Eigen::Index c = 0; c < states.cols(); ++c) k.push_back(states(i, c));
    if (!idx.emplace(std::move(k), static_cast<std::size_t>(i)).second) {
      throw InputError(source + ": duplicate state at data row " + std::to_string(i + 1));
    }
  }
  return idx;
}

void cmd_evaluate(const Options& o, const Paths& p, std::ostream& out) {
  const data::Schema schema = load_schema_or_default(o, p);
  const auto states = schema.names(data::Role::state);
  const auto responses = schema.names(data::Role::response);
  const std::string pred_path = or_default(o.pred, p.fused() / "fused.csv");
  const std::string truth_path = or_default(o.truth, p.aligned() / "hf_test.csv");
  require_file(pred_path, "predictions");
  require_file(truth_path, "truth");
  const csv::Table pt = csv::read_file(pred_path), tt = csv::read_file(truth_path);
  const auto pred_index = index_states(columns(pt, states, pred_path), pred_path);
  const Eigen::MatrixXd truth_states = columns(tt, states, truth_path);

  std::vector<std::size_t> match;
  for (Eigen::Index i = 0; i < truth_states.rows(); ++i) {
    StateKey k;
    for (Eigen::Index c = 0; c < truth_states.cols(); ++c) k.push_back(truth_states(i, c));
    const auto it = pred_index.find(k);
    if (it == pred_index.end()) {
      throw InputError("evaluate: truth row " + std::to_string(i + 1) + " has no prediction at the same state");
    }
    match.push_back(it->second);
  }

  auto file = open_out(p.reports() / "metrics.csv");
  write_metrics_header(file);
  for (const auto& r : responses) {
    const Eigen::VectorXd truth = columns(tt, {r}, truth_path).col(0);
    std::vector<std::pair<std::string, std::string>> sources;
    sources.emplace_back("fused", has_column(pt, r + "_fused") ? r + "_fused" : r);
    if (has_column(pt, r + "_L")) sources.emplace_back("low", r + "_L");
    for (const auto& [label, column] : sources) {
      const Eigen::VectorXd all = columns(pt, {column}, pred_path).col(0);
      Eigen::VectorXd pred(truth.size());
      for (std::size_t i = 0; i < match.size(); ++i) pred(static_cast<Eigen::Index>(i)) = all(static_cast<Eigen::Index>(match[i]));
      const train::Metrics m = train::evaluate_metrics(pred, truth);
      write_metrics_row(file, r, label, match.size(), m);
      out << "evaluate: " << r << " " << label << " rmse=" << csv::format_number(m.rmse) << '\n';
    }
  }
}

void cmd_uq(const Options& o, const Paths& p, std::ostream& out) {
  const data::Schema schema = load_schema_or_default(o, p);
  const std::string hf_path = or_default(o.hf, p.aligned() / "hf_train.csv");
  const std::string fused_path = or_default(o.fused, p.fused() / "fused.csv");
  const std::string query_path = or_default(o.query, p.aligned() / "hf_test.csv");
  require_file(hf_path, "HF data");
  require_file(fused_path, "fused database");
  require_file(query_path, "query states");
  const data::DataSet hf = data::load_csv(hf_path, schema, data::Fidelity::high);
  const csv::Table ft = csv::read_file(fused_path);
  const Eigen::MatrixXd fused_states = columns(ft, hf.state_names, fused_path);
  const Eigen::MatrixXd queries = columns(csv::read_file(query_path), hf.state_names, query_path);

  auto fit = [&](const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
    gp::GPRModel m = gp::fit_gpr(x, y);
    if (o.active_subset > 0 && o.active_subset < m.size()) {
      gp::SelectionConfig sc;
      sc.seed = o.seed;
      m.use_active_subset(gp::select_active_subset(m, o.active_subset, sc));
    }
    return m;
  };

  auto summary = open_out(p.reports() / "uq_summary.csv");
  summary << "response,source,U,alpha,N_test\n";
  for (std::size_t r = 0; r < hf.q(); ++r) {
    const std::string& name = hf.response_names[r];
    const gp::GPRModel raw = fit(hf.states, hf.responses.col(static_cast<Eigen::Index>(r)));
    const gp::GPRModel fused = fit(fused_states, columns(ft, {name + "_fused"}, fused_path).col(0));
    const auto ur = gp::evaluate_uncertainty(raw, queries, o.alpha);
    const auto uf = gp::evaluate_uncertainty(fused, queries, o.alpha);

    auto file = open_out(p.reports() / ("uq_" + name + ".csv"));
    std::vector<std::string> header{"index"};
    for (const auto& s : hf.state_names) header.push_back(s);
    for (const char* src : {"raw", "fused"})
      for (const char* col : {"sigma_", "lower_", "upper_"}) header.push_back(std::string(col) + src);
    csv::write_row(file, header);
    for (std::size_t i = 0; i < ur.n_test(); ++i) {
      file << i << ',';
      std::vector<double> row;
      for (Eigen::Index c = 0; c < queries.cols(); ++c) row.push_back(queries(static_cast<Eigen::Index>(i), c));
      for (const auto* u : {&ur, &uf}) {
        row.push_back(u->sigma[i]);
        row.push_back(u->lower[i]);
        row.push_back(u->upper[i]);
      }
      csv::write_numbers(file, row);
    }
    for (const auto& [label, u] : {std::pair{"raw_hf", &ur}, std::pair{"fused", &uf}}) {
      summary << name << ',' << label << ',' << csv::format_number(u->u) << ',' << csv::format_number(u->alpha) << ','
              << u->n_test() << '\n';
    }
    out << "uq: " << name << " U(raw HF)=" << csv::format_number(ur.u) << " U(fused)=" << csv::format_number(uf.u) << '\n';
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Multi-fidelity aerodynamic data fusion"};
  app.name("lgfnet");
  app.require_subcommand(1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();
  app.set_config("--config", "", "key=value configuration file (flags override it)");
  const char* env_root = std::getenv(kOutputRootEnv);
  o.out_root = env_root ? env_root : "lgf_out";
  app.add_option("--out", o.out_root, std::string("output root (default from ") + kOutputRootEnv + ")");
  app.add_option("--seed", o.seed, "random seed");
  app.add_option("--schema", o.schema, "schema sidecar (column,role,unit)");

  auto* synth = app.add_subcommand("synth", "generate a synthetic LF/HF pair");
  synth->add_option("--kind", o.kind)->check(CLI::IsMember({"smooth", "shock"}));
  synth->add_option("--n-lf", o.n_lf);
  synth->add_option("--n-hf", o.n_hf);
  synth->add_option("--noise", o.noise, "HF noise standard deviation");

  auto* align = app.add_subcommand("align", "align LF and HF data on one state grid");
  align->add_option("--lf", o.lf);
  align->add_option("--hf", o.hf);
  align->add_option("--split", o.split)->check(CLI::IsMember({"none", "holdout", "mach-blocks"}));
  align->add_option("--holdout-every", o.holdout_every);
  align->add_option("--mach-column", o.mach_column);
  align->add_option("--mach-threshold", o.mach_threshold);
  align->add_option("--train-blocks", o.train_blocks);
  align->add_option("--test-blocks", o.test_blocks);
  align->add_option("--nugget", o.nugget);

  auto* trn = app.add_subcommand("train", "train LGFNet on an aligned pair");
  trn->add_option("--aligned", o.aligned);
  trn->add_option("--channels", o.channels)->delimiter(',');
  trn->add_option("--window", o.window);
  trn->add_option("--stride", o.stride);
  trn->add_option("--heads", o.heads);
  trn->add_option("--attention-dropout", o.attention_dropout);
  trn->add_flag("--no-sliding-window", o.no_sliding_window);
  trn->add_flag("--no-attention", o.no_attention);
  trn->add_option("--epochs", o.train.epochs);
  trn->add_option("--batch-size", o.train.batch_size);
  trn->add_option("--lr", o.train.lr);
  trn->add_option("--plateau-patience", o.train.plateau_patience);
  trn->add_option("--plateau-factor", o.train.plateau_factor);
  trn->add_option("--min-lr", o.train.min_lr);

  auto* infer = app.add_subcommand("infer", "fuse the LF database with a trained model");
  infer->add_option("--checkpoint", o.checkpoint);
  infer->add_option("--lf", o.lf);
  infer->add_option("--query", o.query, "extra states to include (default aligned/hf_test.csv when present)");

  auto* evaluate = app.add_subcommand("evaluate", "score predictions against truth");
  evaluate->add_option("--pred", o.pred);
  evaluate->add_option("--truth", o.truth);

  auto* uq = app.add_subcommand("uq", "compare GP uncertainty of raw HF and fused data");
  uq->add_option("--hf", o.hf);
  uq->add_option("--fused", o.fused);
  uq->add_option("--query", o.query);
  uq->add_option("--alpha", o.alpha);
  uq->add_option("--active-subset", o.active_subset, "FIC inducing rows (0 = exact GP)");

  std::string command = args.empty() ? "" : args.front();
  if (!command.empty() && command.front() != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == command;
    if (!known) {
      err << "ERROR command=" << command << " code=usage message=\"unknown command '" << one_line(command)
          << "' (expected synth, align, train, infer, evaluate or uq)\"\n";
      return 2;
    }
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "ERROR command=" << (command.empty() ? "none" : command) << " code=usage message=\"" << one_line(e.what())
        << "\"\n";
    return 2;
  }

  const CLI::App* used = app.get_subcommands().front();
  command = used->get_name();
  const Paths p{o.out_root};
  try {
    const auto t0 = std::chrono::steady_clock::now();
    {
      auto echo = open_out(p.reports() / (command + "_config.ini"));
      // Only the global options and those of the command that ran.
      echo << "# lgfnet " << command << '\n';
      std::istringstream all(app.config_to_str(true, false));
      for (std::string line; std::getline(all, line);) {
        const auto dot = line.find('.'), eq = line.find('=');
        const bool scoped = dot != std::string::npos && dot < eq;
        if (!scoped || line.compare(0, command.size() + 1, command + ".") == 0) echo << line << '\n';
      }
    }
    if (command == "synth") cmd_synth(o, p, out);
    else if (command == "align") cmd_align(o, p, out);
    else if (command == "train") cmd_train(o, p, out);
    else if (command == "infer") cmd_infer(o, p, out);
    else if (command == "evaluate") cmd_evaluate(o, p, out);
    else cmd_uq(o, p, out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ofstream log(p.reports() / "timings.log", std::ios::app);
    log << "command=" << command << " seconds=" << secs << '\n';
    return 0;
  } catch (const Error& e) {
    err << "ERROR command=" << command << " code=" << e.kind() << " message=\"" << one_line(e.what()) << "\"\n";
  } catch (const std::exception& e) {
    err << "ERROR command=" << command << " code=internal message=\"" << one_line(e.what()) << "\"\n";
  }
  return 1;
}

}  // namespace lgf::cli
