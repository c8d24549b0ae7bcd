#include "mfvi/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <ostream>
#include <sstream>

#include "mfvi/blr_ard.hpp"
#include "mfvi/condconj.hpp"
#include "mfvi/diag_gmm.hpp"
#include "mfvi/engine.hpp"
#include "mfvi/errors.hpp"
#include "mfvi/gmm.hpp"
#include "mfvi/io.hpp"
#include "mfvi/lda.hpp"

namespace mfvi::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kModels{"gmm", "gmm-diag", "blr-ard", "lda"};

// ---------------------------------------------------------------- logging

enum class LogLevel { Quiet, Info, Debug };

LogLevel log_level_from_env() {
  const char *raw = std::getenv("VI_LOG");
  if (raw == nullptr || *raw == '\0') {
    return LogLevel::Info;
  }
  const std::string v(raw);
  if (v == "quiet") {
    return LogLevel::Quiet;
  }
  if (v == "info") {
    return LogLevel::Info;
  }
  if (v == "debug") {
    return LogLevel::Debug;
  }
  throw ConfigError("VI_LOG", "must be one of debug, info, quiet");
}

class Logger {
public:
  Logger(std::ostream &err, LogLevel level) : err_(err), level_(level) {}

  void info(const std::string &line) { write(LogLevel::Info, line); }
  void debug(const std::string &line) { write(LogLevel::Debug, line); }
  [[nodiscard]] bool debug_enabled() const { return level_ == LogLevel::Debug; }

private:
  void write(LogLevel at, const std::string &line) {
    if (static_cast<int>(level_) < static_cast<int>(at)) {
      return;
    }
    const std::lock_guard<std::mutex> lock(mutex_);
    err_ << line << '\n';
  }

  std::ostream &err_;
  LogLevel level_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------- options

struct Options {
  std::string model;
  std::string algorithm{"cavi"};
  std::string data;
  std::string out{"."};
  std::uint64_t seed{0};
  std::string seeds;
  std::size_t max_iters{1000};
  double tol{1e-8};
  std::size_t elbo_every{1};
  double heldout_fraction{0.0};
  std::string init{"data_calibrated"};
  bool parallel{false};

  std::size_t k{0};
  double sigma2{1.0};
  double a0{0}, m0{0}, b0{0}, alpha0{0}, beta0{0}, c0{0}, d0{0}, eta{0};
  std::string alpha;
  double kappa{0.7}, delay{1.0}, scale{1.0};
  std::size_t batch{1};

  std::size_t n{1000};
  std::size_t dim{1};
  double separation{0.0};
  double mean_sd{5.0};
  std::size_t docs{100};
  std::size_t doc_length{50};
  std::size_t vocab{20};
  bool disjoint{false};
  std::string beta{"3,0,0,0,0"};
  double noise{1.0};
  std::size_t bins{192};
  std::size_t channels{3};

  std::string fit;

  std::string cov;
  std::optional<double> rho;
  std::string mean{"0,0"};
  std::size_t points{200};

  // Which options were given explicitly.
  std::map<std::string, CLI::Option *> flags;

  [[nodiscard]] bool given(const std::string &name) const {
    const auto it = flags.find(name);
    return it != flags.end() && it->second->count() > 0;
  }
};

std::vector<double> parse_list(const std::string &text, const std::string &field) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception &) {
      throw ConfigError(field, "expected a comma-separated list of numbers");
    }
    if (item.find_first_not_of(" \t", used) != std::string::npos) {
      throw ConfigError(field, "expected a comma-separated list of numbers");
    }
    out.push_back(v);
  }
  if (out.empty()) {
    throw ConfigError(field, "empty list");
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const Options &o) {
  if (!o.given("--seeds")) {
    return {o.seed};
  }
  std::vector<std::uint64_t> out;
  std::stringstream ss(o.seeds);
  std::string item;
  const auto to_u64 = [](const std::string &s) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(s, &used);
    } catch (const std::exception &) {
      throw ConfigError("seeds", "expected integers, a,b,c or a..b");
    }
    if (used != s.size() || s.front() == '-') {
      throw ConfigError("seeds", "expected integers, a,b,c or a..b");
    }
    return static_cast<std::uint64_t>(v);
  };
  while (std::getline(ss, item, ',')) {
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(to_u64(item));
      continue;
    }
    const std::uint64_t lo = to_u64(item.substr(0, dots));
    const std::uint64_t hi = to_u64(item.substr(dots + 2));
    if (hi < lo || hi - lo > 100000) {
      throw ConfigError("seeds", "bad range " + item);
    }
    for (std::uint64_t s = lo; s <= hi; ++s) {
      out.push_back(s);
    }
  }
  if (out.empty()) {
    throw ConfigError("seeds", "no seeds given");
  }
  auto sorted = out;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("seeds", "duplicate seed");
  }
  return out;
}

// `--config file` becomes `--key value` pairs placed right after the command
// name, so that flags given on the command line (parsed later) win.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  std::vector<std::string> rest;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) {
        throw ConfigError("config", "missing file name");
      }
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (path.empty()) {
    return rest;
  }
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("config", "cannot read " + path);
  }
  std::vector<std::string> from_file;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    const auto eq = line.find('=');
    const auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
    };
    if (strip(line).empty()) {
      continue;
    }
    if (eq == std::string::npos) {
      throw ConfigError("config", "line " + std::to_string(lineno) +
                                      ": expected key = value");
    }
    std::string key = strip(line.substr(0, eq));
    std::string value = strip(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (key.empty()) {
      throw ConfigError("config", "line " + std::to_string(lineno) + ": empty key");
    }
    if (value == "false") {
      continue;
    }
    from_file.push_back("--" + key);
    if (value != "true") {
      from_file.push_back(value);
    }
  }
  // rest[0] is the program name, rest[1] the command.
  const std::size_t at = std::min<std::size_t>(2, rest.size());
  rest.insert(rest.begin() + static_cast<std::ptrdiff_t>(at), from_file.begin(),
              from_file.end());
  return rest;
}

void add_shared(CLI::App &app, Options &o) {
  auto &f = o.flags;
  f["--model"] = app.add_option("--model", o.model, "gmm, gmm-diag, blr-ard or lda")
                     ->check(CLI::IsMember(kModels));
  f["--out"] = app.add_option("--out", o.out, "output directory");
  f["--seed"] = app.add_option("--seed", o.seed, "random seed");
  f["--k"] = app.add_option("--k", o.k, "number of components or topics");
  f["--sigma2"] = app.add_option("--sigma2", o.sigma2, "GMM prior variance");
  f["--a0"] = app.add_option("--a0", o.a0, "Dirichlet prior (gmm-diag) or tau shape (blr-ard)");
  f["--m0"] = app.add_option("--m0", o.m0, "gmm-diag prior mean");
  f["--b0"] = app.add_option("--b0", o.b0, "gmm-diag prior precision scale or tau rate (blr-ard)");
  f["--alpha0"] = app.add_option("--alpha0", o.alpha0, "gmm-diag Gamma shape");
  f["--beta0"] = app.add_option("--beta0", o.beta0, "gmm-diag Gamma rate");
  f["--c0"] = app.add_option("--c0", o.c0, "blr-ard relevance shape");
  f["--d0"] = app.add_option("--d0", o.d0, "blr-ard relevance rate");
  f["--eta"] = app.add_option("--eta", o.eta, "LDA topic prior");
  f["--alpha"] = app.add_option("--alpha", o.alpha, "LDA proportion prior: one value or K values");
}

void add_fit_options(CLI::App &app, Options &o) {
  auto &f = o.flags;
  f["--algorithm"] = app.add_option("--algorithm", o.algorithm, "cavi or svi")
                         ->check(CLI::IsMember({"cavi", "svi"}));
  f["--data"] = app.add_option("--data", o.data, "data file");
  f["--seeds"] = app.add_option("--seeds", o.seeds, "seed list: a,b,c or a..b");
  f["--max-iters"] = app.add_option("--max-iters", o.max_iters);
  f["--tol"] = app.add_option("--tol", o.tol, "relative ELBO change tolerance");
  f["--elbo-every"] = app.add_option("--elbo-every", o.elbo_every);
  f["--heldout-fraction"] = app.add_option("--heldout-fraction", o.heldout_fraction);
  f["--init"] = app.add_option("--init", o.init, "prior or data_calibrated");
  f["--parallel"] = app.add_flag("--parallel", o.parallel, "run seeds concurrently");
  f["--kappa"] = app.add_option("--kappa", o.kappa, "SVI step exponent");
  f["--delay"] = app.add_option("--delay", o.delay, "SVI step delay");
  f["--scale"] = app.add_option("--scale", o.scale, "SVI step scale");
  f["--batch"] = app.add_option("--batch", o.batch, "SVI minibatch size");
}

// ---------------------------------------------------------------- output

json to_json(const Eigen::MatrixXd &m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      row.push_back(m(i, j));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const Eigen::VectorXd &v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    out.push_back(v[i]);
  }
  return out;
}

// Flat list when there is a single column.
json per_component(const Eigen::MatrixXd &m) {
  if (m.cols() == 1) {
    return to_json(Eigen::VectorXd(m.col(0)));
  }
  return to_json(m);
}

void write_file(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << text;
  if (!out) {
    throw std::runtime_error("failed writing " + path.string());
  }
}

void write_json(const fs::path &path, const json &j) {
  write_file(path, j.dump(2) + "\n");
}

std::string csv_text(const Eigen::MatrixXd &m, const std::vector<std::string> &header = {}) {
  std::ostringstream s;
  io::write_csv(s, m, header);
  return s.str();
}

std::vector<std::string> numbered(const std::string &prefix, Eigen::Index n) {
  std::vector<std::string> out;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.push_back(prefix + std::to_string(i));
  }
  return out;
}

std::string format17(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

void ensure_dir(const fs::path &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("cannot create output directory " + dir.string());
  }
}

// ---------------------------------------------------------------- data

gmm::Data rows_of(const Eigen::MatrixXd &m, const std::vector<std::size_t> &idx) {
  gmm::Data out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

Eigen::MatrixXd load_matrix(const std::string &path, Eigen::Index min_cols) {
  const io::CsvTable table = io::read_csv(fs::path(path));
  if (table.values.rows() == 0) {
    throw DataFormatError(1, path + ": no data rows");
  }
  if (table.values.cols() < min_cols) {
    throw DataFormatError(table.header.empty() ? 1 : 2,
                          path + ": expected at least " + std::to_string(min_cols) +
                              " columns");
  }
  return table.values;
}

lda::Corpus load_corpus(const std::string &path) {
  lda::Corpus corpus = io::read_uci_corpus(fs::path(path));
  if (corpus.num_docs() == 0 || corpus.total_tokens() == 0) {
    throw DataFormatError(1, path + ": empty corpus");
  }
  if (corpus.vocab < 2) {
    throw DataFormatError(2, path + ": vocabulary needs at least two terms");
  }
  return corpus;
}

// ---------------------------------------------------------------- fit

struct Job {
  Options opts;
  FitConfig fit;
  InitStrategy init{InitStrategy::DataCalibrated};
  StepSchedule schedule;
  bool svi{false};
  fs::path out;

  // Model inputs after the held-out split.
  gmm::Data train;
  std::optional<gmm::Data> heldout;
  Eigen::VectorXd y_train;
  Eigen::VectorXd y_heldout;
  lda::Corpus corpus;
  std::optional<lda::Corpus> heldout_corpus;

  gmm::UniGmmConfig gmm_config;
  gmm::DiagGmmConfig diag_config;
  blr::BlrArdConfig blr_config;
  lda::LdaConfig lda_config;
};

struct RunResult {
  std::uint64_t seed;
  double final_elbo;
  bool converged;
  std::size_t iterations;
};

json report_json(const Job &job, const FitReport &report, std::uint64_t seed) {
  json j;
  j["model"] = job.opts.model;
  j["algorithm"] = job.opts.algorithm;
  j["seed"] = seed;
  j["init"] = std::string(init_strategy_name(job.init));
  j["final_elbo"] = report.final_elbo();
  j["converged"] = report.converged;
  j["iterations"] = report.iterations_run;
  j["metadata"] = report.metadata;
  if (!report.heldout_trace.empty()) {
    j["heldout_log_predictive"] = report.heldout_trace.back().log_predictive;
  }
  return j;
}

SweepObserver debug_observer(Logger &log, std::uint64_t seed) {
  if (!log.debug_enabled()) {
    return {};
  }
  return [&log, seed](std::size_t it, const VariationalModel &model) {
    log.debug("seed " + std::to_string(seed) + " iter " + std::to_string(it) +
              " elbo " + format17(model.elbo()));
  };
}

void log_svi_trace(Logger &log, const FitReport &report, std::uint64_t seed) {
  if (!log.debug_enabled()) {
    return;
  }
  for (const auto &p : report.elbo_trace) {
    log.debug("seed " + std::to_string(seed) + " iter " + std::to_string(p.iteration) +
              " elbo " + format17(p.elbo));
  }
}

RunResult run_gmm(const Job &job, std::uint64_t seed, Logger &log) {
  gmm::UniGmmModel model(job.train, job.gmm_config, job.heldout);
  const MeanFieldState start = init_state(model, job.init, seed);
  FitReport report;
  gmm::UniGmmState params;
  if (!job.svi) {
    report = cavi_fit(model, job.fit, start, debug_observer(log, seed));
    params = model.params();
  } else {
    const gmm::UniGmmConjugate conj(job.train, job.gmm_config,
                                    job.heldout ? &*job.heldout : nullptr);
    FitConfig fit = job.fit;
    fit.seed = seed;
    auto res = svi_fit(conj, job.schedule, fit,
                       conj.to_natural(model.params().m, model.params().s2),
                       SviOptions{job.opts.batch});
    report = std::move(res.report);
    report.metadata = model.metadata();
    std::tie(params.m, params.s2) = conj.components(res.lambda);
    params.phi.resize(job.train.rows(), params.m.rows());
    for (Eigen::Index i = 0; i < job.train.rows(); ++i) {
      const ExpFamParam phi = conj.local_step(res.lambda, static_cast<std::size_t>(i));
      for (Eigen::Index k = 0; k < params.m.rows(); ++k) {
        params.phi(i, k) = phi[static_cast<std::size_t>(k)];
      }
    }
    log_svi_trace(log, report, seed);
  }
  const std::string tag = std::to_string(seed);
  json j = report_json(job, report, seed);
  j["k"] = job.gmm_config.k;
  j["sigma2"] = job.gmm_config.sigma2;
  j["dimension"] = params.m.cols();
  j["means"] = per_component(params.m);
  j["variances"] = per_component(params.s2);
  j["responsibilities_path"] = "resp_" + tag + ".csv";
  write_json(job.out / ("fit_" + tag + ".json"), j);
  write_file(job.out / ("resp_" + tag + ".csv"),
             csv_text(params.phi, numbered("r", params.phi.cols())));
  std::ostringstream trace;
  write_trace_csv(report, trace);
  write_file(job.out / ("trace_" + tag + ".csv"), trace.str());
  return {seed, report.final_elbo(), report.converged, report.iterations_run};
}

RunResult run_diag(const Job &job, std::uint64_t seed, Logger &log) {
  gmm::DiagGmmModel model(job.train, job.diag_config, job.heldout);
  const MeanFieldState start = init_state(model, job.init, seed);
  FitReport report;
  gmm::DiagGmmState params;
  if (!job.svi) {
    report = cavi_fit(model, job.fit, start, debug_observer(log, seed));
    params = model.params();
  } else {
    const gmm::DiagGmmConjugate conj(job.train, job.diag_config,
                                     job.heldout ? &*job.heldout : nullptr);
    FitConfig fit = job.fit;
    fit.seed = seed;
    auto res = svi_fit(conj, job.schedule, fit, conj.to_natural(model.params()),
                       SviOptions{job.opts.batch});
    report = std::move(res.report);
    report.metadata = model.metadata();
    params = conj.globals(res.lambda);
    params.resp.resize(job.train.rows(), params.m.rows());
    for (Eigen::Index i = 0; i < job.train.rows(); ++i) {
      const ExpFamParam r = conj.local_step(res.lambda, static_cast<std::size_t>(i));
      for (Eigen::Index k = 0; k < params.m.rows(); ++k) {
        params.resp(i, k) = r[static_cast<std::size_t>(k)];
      }
    }
    log_svi_trace(log, report, seed);
  }
  const std::string tag = std::to_string(seed);
  json j = report_json(job, report, seed);
  const auto &c = job.diag_config;
  j["k"] = c.k;
  j["a0"] = c.dirichlet_prior();
  j["m0"] = c.m0;
  j["b0"] = c.b0;
  j["alpha0"] = c.alpha0;
  j["beta0"] = c.beta0;
  j["dimension"] = params.m.cols();
  j["weights"] = to_json(Eigen::VectorXd(params.conc / params.conc.sum()));
  j["conc"] = to_json(params.conc);
  j["m"] = to_json(params.m);
  j["b"] = to_json(params.b);
  j["shape"] = to_json(params.shape);
  j["rate"] = to_json(params.rate);
  j["responsibilities_path"] = "resp_" + tag + ".csv";
  write_json(job.out / ("fit_" + tag + ".json"), j);
  write_file(job.out / ("resp_" + tag + ".csv"),
             csv_text(params.resp, numbered("r", params.resp.cols())));
  std::ostringstream trace;
  write_trace_csv(report, trace);
  write_file(job.out / ("trace_" + tag + ".csv"), trace.str());
  return {seed, report.final_elbo(), report.converged, report.iterations_run};
}

RunResult run_blr(const Job &job, std::uint64_t seed, Logger &log) {
  std::optional<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> heldout;
  if (job.heldout) {
    heldout.emplace(*job.heldout, job.y_heldout);
  }
  blr::BlrArdModel model(job.train, job.y_train, job.blr_config, false, heldout);
  const MeanFieldState start = init_state(model, job.init, seed);
  const FitReport report = cavi_fit(model, job.fit, start, debug_observer(log, seed));
  const blr::BlrArdState &s = model.params();
  const blr::BlrExpectations e = blr::blr_expectations(s);
  const std::string tag = std::to_string(seed);
  json j = report_json(job, report, seed);
  j["a0"] = job.blr_config.a0;
  j["b0"] = job.blr_config.b0;
  j["c0"] = job.blr_config.c0;
  j["d0"] = job.blr_config.d0;
  j["beta_star"] = to_json(s.beta_star);
  j["v_star_diag"] = to_json(blr::v_star_diagonal(s.v_inv));
  j["v_inv"] = to_json(s.v_inv);
  j["a_star"] = s.a_star;
  j["b_star"] = s.b_star;
  j["c_star"] = s.c_star[0];
  j["d_star"] = to_json(s.d_star);
  j["e_alpha"] = to_json(e.e_alpha);
  write_json(job.out / ("fit_" + tag + ".json"), j);
  std::ostringstream trace;
  write_trace_csv(report, trace);
  write_file(job.out / ("trace_" + tag + ".csv"), trace.str());
  return {seed, report.final_elbo(), report.converged, report.iterations_run};
}

json top_words(const Eigen::MatrixXd &lambda, std::size_t count) {
  json topics = json::array();
  for (Eigen::Index k = 0; k < lambda.rows(); ++k) {
    const Eigen::VectorXd row = lambda.row(k).transpose() / lambda.row(k).sum();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(row.size()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return row[a] > row[b]; });
    json words = json::array();
    for (std::size_t r = 0; r < std::min(count, order.size()); ++r) {
      words.push_back({{"term", order[r] + 1}, {"prob", row[order[r]]}});
    }
    topics.push_back(std::move(words));
  }
  return topics;
}

RunResult run_lda(const Job &job, std::uint64_t seed, Logger &log) {
  FitConfig fit = job.fit;
  fit.seed = seed;
  lda::LdaFit result;
  if (!job.svi) {
    lda::LdaModel model(job.corpus, job.lda_config, job.heldout_corpus);
    const MeanFieldState start = init_state(model, job.init, seed);
    result.report = cavi_fit(model, fit, start, debug_observer(log, seed));
    result.state = model.params();
  } else {
    result = lda::lda_svi_fit(job.corpus, job.lda_config, job.schedule, fit,
                              job.opts.batch,
                              job.heldout_corpus ? &*job.heldout_corpus : nullptr);
    result.report.metadata = lda::LdaModel(job.corpus, job.lda_config).metadata();
    log_svi_trace(log, result.report, seed);
  }
  const std::string tag = std::to_string(seed);
  json j = report_json(job, result.report, seed);
  j["k"] = job.lda_config.k;
  j["vocab"] = job.corpus.vocab;
  j["eta"] = job.lda_config.eta;
  j["alpha"] = to_json(job.lda_config.alpha_vector());
  j["lambda"] = top_words(result.state.lambda, 20);
  j["lambda_csv"] = "lambda_" + tag + ".csv";
  j["gamma_csv"] = "gamma_" + tag + ".csv";
  write_json(job.out / ("fit_" + tag + ".json"), j);
  write_file(job.out / ("lambda_" + tag + ".csv"), csv_text(result.state.lambda));
  write_file(job.out / ("gamma_" + tag + ".csv"), csv_text(result.state.gamma));
  std::ostringstream trace;
  write_trace_csv(result.report, trace);
  write_file(job.out / ("trace_" + tag + ".csv"), trace.str());
  return {seed, result.report.final_elbo(), result.report.converged,
          result.report.iterations_run};
}

double require_positive(const Options &o, const std::string &flag, double value,
                        double fallback) {
  if (!o.given(flag)) {
    return fallback;
  }
  if (!(value > 0.0) || !std::isfinite(value)) {
    throw ConfigError(flag.substr(2), "must be positive");
  }
  return value;
}

std::size_t require_k(const Options &o) {
  if (!o.given("--k")) {
    throw ConfigError("k", "required for --model " + o.model);
  }
  if (o.k == 0) {
    throw ConfigError("k", "must be at least 1");
  }
  return o.k;
}

int cmd_fit(const Options &o, std::ostream &out, Logger &log) {
  if (!o.given("--model")) {
    throw ConfigError("model", "required");
  }
  if (!o.given("--data")) {
    throw ConfigError("data", "required");
  }
  Job job;
  job.opts = o;
  job.svi = o.algorithm == "svi";
  job.init = parse_init_strategy(o.init);
  job.fit.max_iters = o.max_iters;
  job.fit.tol = o.tol;
  job.fit.elbo_every = o.elbo_every;
  job.fit.heldout_fraction = o.heldout_fraction;
  job.fit.validate();
  const std::vector<std::uint64_t> seeds = parse_seeds(o);

  if (job.svi) {
    if (o.model == "blr-ard") {
      throw ConfigError("algorithm", "svi is not available for blr-ard (no local variables)");
    }
    if (!o.given("--kappa")) {
      throw ConfigError("kappa", "required with --algorithm svi");
    }
    job.schedule = {o.kappa, o.delay, o.scale};
    job.schedule.validate();
    if (o.batch == 0) {
      throw ConfigError("batch", "must be at least 1");
    }
  }

  // Hyperparameters.
  if (o.model == "gmm") {
    job.gmm_config.k = require_k(o);
    job.gmm_config.sigma2 = require_positive(o, "--sigma2", o.sigma2, 1.0);
    job.gmm_config.validate();
  } else if (o.model == "gmm-diag") {
    auto &c = job.diag_config;
    c.k = require_k(o);
    if (o.given("--a0")) {
      c.a0 = require_positive(o, "--a0", o.a0, 1.0);
    }
    c.m0 = o.given("--m0") ? o.m0 : 0.0;
    c.b0 = require_positive(o, "--b0", o.b0, 1.0);
    c.alpha0 = require_positive(o, "--alpha0", o.alpha0, 1.0);
    c.beta0 = require_positive(o, "--beta0", o.beta0, 1.0);
    c.validate();
  } else if (o.model == "blr-ard") {
    const blr::BlrArdConfig defaults;
    auto &c = job.blr_config;
    c.a0 = require_positive(o, "--a0", o.a0, defaults.a0);
    c.b0 = require_positive(o, "--b0", o.b0, defaults.b0);
    c.c0 = require_positive(o, "--c0", o.c0, defaults.c0);
    c.d0 = require_positive(o, "--d0", o.d0, defaults.d0);
    c.validate();
  } else {
    auto &c = job.lda_config;
    c.k = require_k(o);
    c.eta = require_positive(o, "--eta", o.eta, lda::LdaConfig{}.eta);
    if (o.given("--alpha")) {
      c.alpha = parse_list(o.alpha, "alpha");
      if (c.alpha.size() == 1) {
        c.alpha.assign(c.k, c.alpha[0]);
      }
    }
    c.validate();
  }

  // Data and held-out split (shared by all seeds; split seeded by the first).
  if (o.model == "lda") {
    lda::Corpus corpus = load_corpus(o.data);
    const Split split = heldout_split(corpus.num_docs(), o.heldout_fraction, seeds.front());
    job.corpus.vocab = corpus.vocab;
    for (std::size_t d : split.train) {
      job.corpus.docs.push_back(corpus.docs[d]);
    }
    if (!split.heldout.empty()) {
      job.heldout_corpus.emplace();
      job.heldout_corpus->vocab = corpus.vocab;
      for (std::size_t d : split.heldout) {
        job.heldout_corpus->docs.push_back(corpus.docs[d]);
      }
    }
  } else {
    const Eigen::MatrixXd all = load_matrix(o.data, o.model == "blr-ard" ? 2 : 1);
    const Split split = heldout_split(static_cast<std::size_t>(all.rows()),
                                      o.heldout_fraction, seeds.front());
    const gmm::Data train = rows_of(all, split.train);
    const gmm::Data held = rows_of(all, split.heldout);
    if (o.model == "blr-ard") {
      const Eigen::Index d = all.cols() - 1;
      job.train = train.leftCols(d);
      job.y_train = train.col(d);
      if (held.rows() > 0) {
        job.heldout = held.leftCols(d);
        job.y_heldout = held.col(d);
      }
    } else {
      job.train = train;
      if (held.rows() > 0) {
        job.heldout = held;
      }
    }
  }

  job.out = o.out;
  ensure_dir(job.out);

  const auto run_one = [&job, &log](std::uint64_t seed) -> RunResult {
    Job local_view = job; // each run gets its own copy of the inputs
    local_view.fit.seed = seed;
    if (local_view.opts.model == "gmm") {
      return run_gmm(local_view, seed, log);
    }
    if (local_view.opts.model == "gmm-diag") {
      return run_diag(local_view, seed, log);
    }
    if (local_view.opts.model == "blr-ard") {
      return run_blr(local_view, seed, log);
    }
    return run_lda(local_view, seed, log);
  };

  std::vector<RunResult> results;
  if (o.parallel && seeds.size() > 1) {
    std::vector<std::future<RunResult>> futures;
    for (std::uint64_t s : seeds) {
      futures.push_back(std::async(std::launch::async, run_one, s));
    }
    for (auto &f : futures) {
      results.push_back(f.get());
    }
  } else {
    for (std::uint64_t s : seeds) {
      results.push_back(run_one(s));
    }
  }

  json runs = json::array();
  for (const RunResult &r : results) {
    log.info("seed " + std::to_string(r.seed) + ": elbo " + format17(r.final_elbo) +
             " after " + std::to_string(r.iterations) + " iterations" +
             (r.converged ? " (converged)" : " (not converged)"));
    runs.push_back({{"seed", r.seed},
                    {"final_elbo", r.final_elbo},
                    {"converged", r.converged},
                    {"iterations", r.iterations}});
  }
  json summary{{"model", o.model}, {"algorithm", o.algorithm}, {"runs", runs}};
  write_json(job.out / "summary.json", summary);
  out << job.out.string() << "/summary.json\n";
  return kExitOk;
}

// ---------------------------------------------------------------- simulate

int cmd_simulate(const Options &o, std::ostream &out, Logger &log) {
  if (!o.given("--model")) {
    throw ConfigError("model", "required");
  }
  if (o.n == 0) {
    throw ConfigError("n", "must be at least 1");
  }
  const fs::path dir = o.out;
  ensure_dir(dir);
  json truth;
  truth["model"] = o.model;
  truth["seed"] = o.seed;
  fs::path data_path = dir / "data.csv";
  if (o.model == "gmm" || o.model == "gmm-diag") {
    const std::size_t k = require_k(o);
    gmm::Simulation sim;
    if (o.model == "gmm") {
      if (o.dim == 0) {
        throw ConfigError("dim", "must be at least 1");
      }
      if (!(o.separation >= 0.0) || !(o.mean_sd > 0.0)) {
        throw ConfigError("separation", "needs separation >= 0 and mean-sd > 0");
      }
      gmm::SimulationOptions so;
      so.mean_sd = o.mean_sd;
      so.min_separation = o.separation;
      sim = gmm::simulate(k, o.n, o.seed, o.dim, so);
    } else {
      if (o.bins == 0 || o.channels == 0) {
        throw ConfigError("bins", "bins and channels must be positive");
      }
      sim = gmm::simulate_histograms(k, o.n, o.seed, o.bins, o.channels);
    }
    truth["means"] = to_json(sim.means);
    truth["labels"] = sim.labels;
    write_file(data_path, csv_text(sim.data));
  } else if (o.model == "blr-ard") {
    const std::vector<double> b = parse_list(o.beta, "beta");
    if (!(o.noise >= 0.0)) {
      throw ConfigError("noise", "must be nonnegative");
    }
    const Eigen::VectorXd beta =
        Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
    const blr::RegressionData sim = blr::simulate_regression(o.n, beta, o.noise, o.seed);
    Eigen::MatrixXd table(sim.x.rows(), sim.x.cols() + 1);
    table << sim.x, sim.y;
    truth["beta"] = to_json(beta);
    truth["noise_sd"] = o.noise;
    write_file(data_path, csv_text(table));
  } else {
    const std::size_t k = require_k(o);
    lda::CorpusOptions co;
    co.disjoint = o.disjoint;
    if (o.given("--eta")) {
      co.eta = require_positive(o, "--eta", o.eta, co.eta);
    }
    if (o.given("--alpha")) {
      const std::vector<double> a = parse_list(o.alpha, "alpha");
      if (a.size() != 1 || !(a[0] > 0.0)) {
        throw ConfigError("alpha", "simulation takes one positive value");
      }
      co.alpha = a[0];
    }
    if (o.docs == 0 || o.doc_length == 0 || o.vocab < 2 || (o.disjoint && o.vocab < k)) {
      throw ConfigError("vocab", "need docs >= 1, doc-length >= 1 and enough vocabulary");
    }
    const lda::CorpusSimulation sim =
        lda::simulate_corpus(k, o.docs, o.doc_length, o.vocab, o.seed, co);
    truth["topics"] = to_json(sim.topics);
    truth["proportions"] = to_json(sim.proportions);
    truth["disjoint"] = o.disjoint;
    data_path = dir / "corpus.txt";
    std::ostringstream text;
    io::write_uci_corpus(text, sim.corpus);
    write_file(data_path, text.str());
  }
  write_json(dir / "truth.json", truth);
  log.info("wrote " + data_path.string());
  out << data_path.string() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- eval

json read_fit_json(const fs::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw DataFormatError(0, "cannot open " + path.string());
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string text = buffer.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error &e) {
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + static_cast<std::size_t>(
                              std::count(text.begin(), text.begin() +
                                                           static_cast<std::ptrdiff_t>(upto),
                                         '\n'));
    throw DataFormatError(line, path.string() + ": invalid JSON");
  }
}

Eigen::MatrixXd matrix_field(const json &j, const std::string &key) {
  if (!j.contains(key)) {
    throw DataFormatError(0, "fit file lacks `" + key + "`");
  }
  const json &v = j.at(key);
  try {
    if (v.is_array() && !v.empty() && v.front().is_array()) {
      const auto rows = static_cast<Eigen::Index>(v.size());
      const auto cols = static_cast<Eigen::Index>(v.front().size());
      Eigen::MatrixXd m(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i) {
        if (static_cast<Eigen::Index>(v[static_cast<std::size_t>(i)].size()) != cols) {
          throw DataFormatError(0, "ragged `" + key + "` in fit file");
        }
        for (Eigen::Index c = 0; c < cols; ++c) {
          m(i, c) = v[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
        }
      }
      return m;
    }
    const auto values = v.get<std::vector<double>>();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(values.size()), 1);
    for (std::size_t i = 0; i < values.size(); ++i) {
      m(static_cast<Eigen::Index>(i), 0) = values[i];
    }
    return m;
  } catch (const json::exception &) {
    throw DataFormatError(0, "fit file field `" + key + "` is not numeric");
  }
}

template <class T> T scalar_field(const json &j, const std::string &key) {
  if (!j.contains(key)) {
    throw DataFormatError(0, "fit file lacks `" + key + "`");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception &) {
    throw DataFormatError(0, "fit file field `" + key + "` has the wrong type");
  }
}

Eigen::MatrixXd load_heldout_matrix(const std::string &path, Eigen::Index cols) {
  const io::CsvTable t = io::read_csv(fs::path(path));
  if (t.values.rows() == 0) {
    throw DataFormatError(1, path + ": empty held-out set");
  }
  if (t.values.cols() != cols) {
    throw DataFormatError(t.header.empty() ? 1 : 2,
                          path + ": expected " + std::to_string(cols) + " columns, found " +
                              std::to_string(t.values.cols()));
  }
  return t.values;
}

int cmd_eval(const Options &o, std::ostream &out, Logger &log) {
  if (o.fit.empty()) {
    throw ConfigError("fit", "required");
  }
  if (o.data.empty()) {
    throw ConfigError("data", "required");
  }
  const fs::path fit_path = o.fit;
  const json j = read_fit_json(fit_path);
  const std::string model = scalar_field<std::string>(j, "model");
  double value = 0.0;
  std::size_t count = 0;
  if (model == "gmm") {
    const Eigen::MatrixXd means = matrix_field(j, "means");
    const auto dims = scalar_field<Eigen::Index>(j, "dimension");
    const Eigen::MatrixXd &m = means; // a flat list reads as K x 1
    if (m.cols() != dims) {
      throw DataFormatError(0, "fit file means do not match its dimension");
    }
    const Eigen::MatrixXd x = load_heldout_matrix(o.data, dims);
    value = gmm::heldout_log_predictive(m, x);
    count = static_cast<std::size_t>(x.rows());
  } else if (model == "gmm-diag") {
    gmm::DiagGmmState s;
    s.conc = matrix_field(j, "conc").col(0);
    s.m = matrix_field(j, "m");
    s.b = matrix_field(j, "b");
    s.shape = matrix_field(j, "shape");
    s.rate = matrix_field(j, "rate");
    if (s.conc.size() != s.m.rows() || s.b.rows() != s.m.rows() ||
        s.shape.rows() != s.m.rows() || s.rate.rows() != s.m.rows()) {
      throw DataFormatError(0, "fit file parameter shapes disagree");
    }
    const Eigen::MatrixXd x = load_heldout_matrix(o.data, s.m.cols());
    value = gmm::diag_gmm_heldout_log_predictive(s, x);
    count = static_cast<std::size_t>(x.rows());
  } else if (model == "blr-ard") {
    blr::BlrArdState s;
    s.beta_star = matrix_field(j, "beta_star").col(0);
    s.v_inv = matrix_field(j, "v_inv");
    s.a_star = scalar_field<double>(j, "a_star");
    s.b_star = scalar_field<double>(j, "b_star");
    const Eigen::Index d = s.beta_star.size();
    if (s.v_inv.rows() != d || s.v_inv.cols() != d) {
      throw DataFormatError(0, "fit file v_inv does not match beta_star");
    }
    const Eigen::MatrixXd t = load_heldout_matrix(o.data, d + 1);
    value = blr::blr_heldout_log_predictive(s, t.leftCols(d), t.col(d));
    count = static_cast<std::size_t>(t.rows());
  } else if (model == "lda") {
    const fs::path lambda_path =
        fit_path.parent_path() / scalar_field<std::string>(j, "lambda_csv");
    const Eigen::MatrixXd lambda = io::read_csv(lambda_path).values;
    lda::LdaConfig c;
    c.k = scalar_field<std::size_t>(j, "k");
    c.eta = scalar_field<double>(j, "eta");
    const Eigen::MatrixXd alpha = matrix_field(j, "alpha");
    c.alpha.assign(alpha.data(), alpha.data() + alpha.size());
    if (lambda.rows() != static_cast<Eigen::Index>(c.k)) {
      throw DataFormatError(0, "lambda file does not have K rows");
    }
    const lda::Corpus held = io::read_uci_corpus(fs::path(o.data));
    if (held.total_tokens() == 0) {
      throw DataFormatError(1, o.data + ": empty held-out set");
    }
    if (held.vocab > static_cast<std::size_t>(lambda.cols())) {
      throw DataFormatError(2, o.data + ": vocabulary larger than the fitted one");
    }
    value = lda::lda_heldout_log_predictive(lambda, held, c);
    count = held.total_tokens();
  } else {
    throw DataFormatError(0, "unknown model `" + model + "` in fit file");
  }

  const fs::path dir = o.given("--out") ? fs::path(o.out) : fit_path.parent_path();
  if (!dir.empty()) {
    ensure_dir(dir);
  }
  json result{{"model", model},
              {"fit", fit_path.string()},
              {"data", o.data},
              {"heldout_log_predictive", value},
              {model == "lda" ? "tokens" : "points", count}};
  write_json((dir.empty() ? fs::path(".") : dir) / "eval.json", result);
  log.info("average held-out log predictive over " + std::to_string(count) +
           (model == "lda" ? " tokens" : " points"));
  out << "heldout_log_predictive " << format17(value) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------- diagnose

int cmd_diagnose(const Options &o, std::ostream &out, Logger &log) {
  Eigen::Matrix2d cov;
  if (o.rho) {
    if (o.given("--cov")) {
      throw ConfigError("cov", "give either --cov or --rho");
    }
    cov << 1.0, *o.rho, *o.rho, 1.0;
  } else {
    if (!o.given("--cov")) {
      throw ConfigError("cov", "required (s11,s12,s22 or four entries)");
    }
    const std::vector<double> c = parse_list(o.cov, "cov");
    if (c.size() == 3) {
      cov << c[0], c[1], c[1], c[2];
    } else if (c.size() == 4) {
      if (c[1] != c[2]) {
        throw ConfigError("cov", "not symmetric");
      }
      cov << c[0], c[1], c[2], c[3];
    } else {
      throw ConfigError("cov", "expected 3 or 4 entries");
    }
  }
  if (!cov.allFinite() || !(cov(0, 0) > 0.0) ||
      !(cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0) > 0.0)) {
    throw ConfigError("cov", "not symmetric positive definite");
  }
  const std::vector<double> mv = parse_list(o.mean, "mean");
  if (mv.size() != 2) {
    throw ConfigError("mean", "expected two entries");
  }
  if (o.points < 3) {
    throw ConfigError("points", "need at least 3 contour points");
  }
  const std::array<double, 2> mean{mv[0], mv[1]};
  const BivariateMeanField mf = meanfield_gaussian_fixed_point(mean, cov);
  Eigen::Matrix2d q = Eigen::Matrix2d::Zero();
  q(0, 0) = mf.variances[0];
  q(1, 1) = mf.variances[1];

  std::ostringstream csv;
  csv << std::setprecision(17) << "curve,x,y\n";
  for (const auto &p : gaussian_contour(mean, cov, 2.0, o.points)) {
    csv << "target," << p[0] << ',' << p[1] << '\n';
  }
  for (const auto &p : gaussian_contour(mf.means, q, 2.0, o.points)) {
    csv << "meanfield," << p[0] << ',' << p[1] << '\n';
  }
  const fs::path dir = o.out;
  ensure_dir(dir);
  write_file(dir / "meanfield.csv", csv.str());
  json j{{"target_mean", mean},
         {"target_covariance", to_json(Eigen::MatrixXd(cov))},
         {"target_marginal_variances", {cov(0, 0), cov(1, 1)}},
         {"meanfield_means", mf.means},
         {"meanfield_variances", mf.variances},
         {"contour_sigma", 2.0}};
  write_json(dir / "meanfield.json", j);
  log.info("wrote " + (dir / "meanfield.csv").string());
  out << "meanfield_variances " << format17(mf.variances[0]) << ' '
      << format17(mf.variances[1]) << '\n';
  return kExitOk;
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out,
            std::ostream &err) {
  try {
    const LogLevel level = log_level_from_env();
    Logger log(err, level);

    std::vector<std::string> args(argv, argv + argc);
    args = expand_config(std::move(args));

    CLI::App app{"Mean-field variational inference"};
    app.name("vi");
    app.require_subcommand(1);
    Options o;

    auto *fit = app.add_subcommand("fit", "fit a model with CAVI or SVI");
    auto *sim = app.add_subcommand("simulate", "write a synthetic dataset and its truth");
    auto *eval = app.add_subcommand("eval", "average held-out log predictive of a fit");
    auto *diag = app.add_subcommand("diagnose-meanfield",
                                    "mean-field fit to a bivariate Gaussian");
    for (auto *sub : {fit, sim, eval, diag}) {
      sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
    add_shared(*fit, o);
    add_fit_options(*fit, o);

    Options so; // simulate has its own option set sharing the struct layout
    add_shared(*sim, so);
    so.flags["--n"] = sim->add_option("--n", so.n, "number of points");
    so.flags["--dim"] = sim->add_option("--dim", so.dim, "gmm dimension");
    so.flags["--separation"] =
        sim->add_option("--separation", so.separation, "minimum distance between gmm means");
    so.flags["--mean-sd"] = sim->add_option("--mean-sd", so.mean_sd, "sd of gmm means");
    so.flags["--docs"] = sim->add_option("--docs", so.docs, "lda documents");
    so.flags["--doc-length"] = sim->add_option("--doc-length", so.doc_length, "tokens per document");
    so.flags["--vocab"] = sim->add_option("--vocab", so.vocab, "lda vocabulary size");
    so.flags["--disjoint"] = sim->add_flag("--disjoint", so.disjoint, "topics partition the vocabulary");
    so.flags["--beta"] = sim->add_option("--beta", so.beta, "blr-ard coefficients");
    so.flags["--noise"] = sim->add_option("--noise", so.noise, "blr-ard noise sd");
    so.flags["--bins"] = sim->add_option("--bins", so.bins, "gmm-diag histogram bins per channel");
    so.flags["--channels"] = sim->add_option("--channels", so.channels, "gmm-diag channels");

    Options eo;
    eo.flags["--fit"] = eval->add_option("--fit", eo.fit, "fit_<seed>.json");
    eo.flags["--data"] = eval->add_option("--data", eo.data, "held-out data");
    eo.flags["--out"] = eval->add_option("--out", eo.out, "directory for eval.json");

    Options dopt;
    dopt.flags["--cov"] = diag->add_option("--cov", dopt.cov, "s11,s12,s22 or s11,s12,s21,s22");
    dopt.flags["--rho"] = diag->add_option("--rho", dopt.rho, "unit-variance correlation");
    dopt.flags["--mean"] = diag->add_option("--mean", dopt.mean, "target mean m1,m2");
    dopt.flags["--points"] = diag->add_option("--points", dopt.points, "points per contour");
    dopt.flags["--out"] = diag->add_option("--out", dopt.out, "output directory");

    try {
      std::vector<const char *> cargs;
      for (const auto &a : args) {
        cargs.push_back(a.c_str());
      }
      app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp &) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::ParseError &e) {
      err << "config error: " << e.what() << '\n';
      return kExitConfig;
    }

    if (fit->parsed()) {
      return cmd_fit(o, out, log);
    }
    if (sim->parsed()) {
      return cmd_simulate(so, out, log);
    }
    if (eval->parsed()) {
      return cmd_eval(eo, out, log);
    }
    return cmd_diagnose(dopt, out, log);
  } catch (const ConfigError &e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataFormatError &e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericError &e) {
    err << "numeric error at iteration " << e.iteration() << ": " << e.message() << '\n';
    return kExitNumeric;
  } catch (const LinalgError &e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DomainError &e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return kExitOther;
  }
}

} // namespace mfvi::cli
