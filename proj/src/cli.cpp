#include "arbor/cli.hpp"

#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "arbor/io.hpp"
#include "arbor/newick.hpp"
#include "arbor/structure.hpp"

namespace arbor {

namespace {

namespace fs = std::filesystem;

struct RunContext {
  std::string subcommand;
  std::string out_dir;
  Json config = Json::object();
  std::uint64_t seed = 0;
  Json inputs = Json::object();
  std::vector<std::string> outputs;
  Json extra = Json::object();

  void note_input(const std::string& path) { inputs[path] = file_digest(path); }

  std::string path_of(const std::string& name) const {
    return (fs::path(out_dir) / name).string();
  }

  void emit(const std::string& name, const std::string& content) {
    write_text_file(path_of(name), content);
    outputs.push_back(name);
  }

  void finish() {
    Json manifest;
    manifest["subcommand"] = subcommand;
    manifest["config"] = config;
    manifest["seed"] = seed;
    manifest["inputs"] = inputs;
    std::sort(outputs.begin(), outputs.end());
    manifest["outputs"] = outputs;
    for (const auto& [k, v] : extra.items()) manifest[k] = v;
    write_text_file(path_of("manifest.json"), manifest.dump(2) + "\n");
  }
};

std::uint64_t materialize_seed(std::int64_t given) {
  if (given >= 0) return static_cast<std::uint64_t>(given);
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

Dataset load_data(RunContext& ctx, const std::string& path, const std::string& kind,
                  int states) {
  ctx.note_input(path);
  Dataset data = read_csv(path, states > 0 ? std::optional<int>(states) : std::nullopt);
  if (kind == "gaussian" && data.kind != Dataset::Kind::continuous) {
    data.kind = Dataset::Kind::continuous;  // integer-valued columns read as reals
    data.d = 0;
  }
  if (kind == "markov" && data.kind != Dataset::Kind::discrete)
    throw DataError("markov models need discrete data (integer states 0..d-1)");
  data.validate();
  return data;
}

std::map<int, double> sample_leaf_variances(const Dataset& data) {
  std::map<int, double> var;
  for (int i = 0; i < data.observed_count(); ++i)
    var[i + 1] = std::max(data.values.col(i).squaredNorm() / data.n(), 1e-12);
  return var;
}

// NJ on empirical distances plus a parameter back-fill; the default
// initializer for learn-sem and the whole of learn-nj.
struct NjLearned {
  NJResult nj;
  AnyParams model;
  Json note = Json::object();
};

NjLearned learn_nj_pipeline(const Dataset& data, const std::string& kind) {
  const SecondOrderKind sk = kind == "gaussian" ? SecondOrderKind::gaussian_correlation
                                                : SecondOrderKind::markov_tau;
  const EmpiricalSecondOrder s = empirical_second_order(data, sk);
  const DistanceMatrix D = distances_from_second_order(s);
  NjLearned out;
  out.nj = neighbor_joining(D);
  if (kind == "gaussian") {
    GaussianParams g = edge_correlations_from_lengths(out.nj.tree, out.nj.lengths);
    g.leaf_var = sample_leaf_variances(data);
    out.model = std::move(g);
    out.note["edge_correlation_signs"] = "unresolved";
  } else {
    std::map<Edge, double> tau;
    for (const auto& [e, len] : out.nj.lengths)
      tau[e] = std::exp(-std::max(len, 1e-9));  // keep |tau| < 1 (A2)
    out.model = symmetric_discrete_recover(out.nj.tree, tau, data.d);
    out.note["parameterization"] = "symmetric submodel (uniform root, equal off-diagonals)";
  }
  return out;
}

AnyParams initial_params(RunContext& ctx, const std::string& init_model_path,
                         const LeafLabeledTree& tree, const Dataset& data,
                         const std::string& kind, std::uint64_t seed) {
  if (!init_model_path.empty()) {
    ctx.note_input(init_model_path);
    return read_model_json(init_model_path);
  }
  Rng rng = make_rng(seed, "cli-init");
  if (kind == "gaussian") return random_gaussian_params(tree, sample_leaf_variances(data), rng);
  return random_markov_params(tree, data.d, rng);
}

void write_scored(RunContext& ctx, const ScoredModel& scored) {
  ctx.emit("scored.json", scored_model_to_json(scored).dump(2) + "\n");
  Json model = model_to_json(scored.model);
  ctx.emit("model.json", model.dump(2) + "\n");
  std::visit([&](const auto& q) { ctx.emit("tree.nwk", newick_write(q.tree) + "\n"); },
             scored.model);
}

// ---------------------------------------------------------------------------

struct Options {
  std::string data, model, tree, kind = "gaussian", out, init_model;
  int states = 0;
  long n = 1000;
  std::int64_t seed = -1;
  double tol = 1e-8;
  int max_iter = 500;
  int restarts = 10;
  int max_outer = 50;
  int inner_iters = 5;
  int bootstrap = 0;
  bool trivalent = false;
  bool hidden = false;
};

int dispatch(const std::string& sub, const Options& opt) {
  RunContext ctx;
  ctx.subcommand = sub;
  if (opt.out.empty()) throw DataError("--out is required");
  ctx.out_dir = opt.out;
  fs::create_directories(ctx.out_dir);
  ctx.seed = materialize_seed(opt.seed);
  // The output directory is deliberately not part of the manifest, so runs
  // into different directories stay byte-comparable.
  ctx.config = Json{{"data", opt.data},       {"model", opt.model},
                    {"tree", opt.tree},       {"kind", opt.kind},
                    {"states", opt.states},   {"n", opt.n},
                    {"tol", opt.tol},         {"max_iter", opt.max_iter},
                    {"restarts", opt.restarts}, {"max_outer", opt.max_outer},
                    {"inner_iters", opt.inner_iters}, {"bootstrap", opt.bootstrap},
                    {"trivalent", opt.trivalent}, {"hidden", opt.hidden},
                    {"init_model", opt.init_model}};

  if (sub == "simulate") {
    ctx.note_input(opt.model);
    const AnyParams p = read_model_json(opt.model);
    const Dataset data = simulate(p, opt.n, ctx.seed, opt.hidden);
    write_csv(data, ctx.path_of("data.csv"));
    ctx.outputs.push_back("data.csv");
    ctx.finish();
    return 0;
  }

  if (sub == "learn-nj") {
    const Dataset data = load_data(ctx, opt.data, opt.kind, opt.states);
    const SecondOrderKind sk = opt.kind == "gaussian" ? SecondOrderKind::gaussian_correlation
                                                      : SecondOrderKind::markov_tau;
    const EmpiricalSecondOrder s = empirical_second_order(data, sk);
    write_distance_csv(distances_from_second_order(s), ctx.path_of("distances.csv"));
    ctx.outputs.push_back("distances.csv");
    NjLearned learned = learn_nj_pipeline(data, opt.kind);
    ctx.emit("tree.nwk", newick_write(learned.nj.tree, learned.nj.lengths) + "\n");
    Json model = model_to_json(learned.model);
    for (const auto& [k, v] : learned.note.items()) model[k] = v;
    ctx.emit("model.json", model.dump(2) + "\n");
    ctx.extra["clamped_edge_lengths"] = learned.nj.clamped;
    ctx.finish();
    return 0;
  }

  if (sub == "learn-cl") {
    const Dataset data = load_data(ctx, opt.data, opt.kind, opt.states);
    const SecondOrderKind sk = opt.kind == "gaussian" ? SecondOrderKind::gaussian_correlation
                                                      : SecondOrderKind::markov_tau;
    const WeightedGraph w = mutual_information_weights(data, sk);
    const SpanningTree st = chow_liu(w);
    Json j;
    j["total_weight"] = st.total_weight;
    j["edges"] = Json::array();
    for (const Edge& e : st.edges)
      j["edges"].push_back({{"u", e.u}, {"v", e.v}, {"weight", w.w(e.u - 1, e.v - 1)}});
    ctx.emit("chow_liu.json", j.dump(2) + "\n");
    ctx.finish();
    return 0;
  }

  if (sub == "em") {
    const Dataset data = load_data(ctx, opt.data, opt.kind, opt.states);
    ctx.note_input(opt.tree);
    const NewickTree nt = newick_parse(read_text_file(opt.tree));
    const AnyParams init =
        initial_params(ctx, opt.init_model, nt.tree, data, opt.kind, ctx.seed);
    EmOptions em;
    em.max_iter = opt.max_iter;
    em.tol = opt.tol;
    em.restarts = opt.restarts;
    em.seed = ctx.seed;
    const LeafLabeledTree* itree = nullptr;
    std::visit([&](const auto& q) { itree = &q.tree; }, init);
    const ScoredModel scored = em_fixed_tree(*itree, data, init, em);
    write_scored(ctx, scored);
    ctx.finish();
    return 0;
  }

  if (sub == "learn-sem") {
    const Dataset data = load_data(ctx, opt.data, opt.kind, opt.states);
    AnyParams init_params_v = [&]() -> AnyParams {
      if (!opt.init_model.empty()) {
        ctx.note_input(opt.init_model);
        return read_model_json(opt.init_model);
      }
      return learn_nj_pipeline(data, opt.kind).model;
    }();
    ScoredModel init = bic_score(init_params_v, data);
    ctx.extra["init_loglik"] = init.loglik;
    SemOptions sem;
    sem.em.max_iter = opt.max_iter;
    sem.em.tol = opt.tol;
    sem.em.restarts = opt.restarts;
    sem.em.seed = ctx.seed;
    sem.max_outer = opt.max_outer;
    sem.inner_em_iters = opt.inner_iters;
    sem.trivalent = opt.trivalent;
    const ScoredModel scored = structural_em(data, init, sem);
    write_scored(ctx, scored);
    ctx.finish();
    return 0;
  }

  if (sub == "score") {
    ctx.note_input(opt.model);
    const AnyParams p = read_model_json(opt.model);
    const Dataset data = load_data(
        ctx, opt.data, std::holds_alternative<GaussianParams>(p) ? "gaussian" : "markov",
        std::holds_alternative<MarkovParams>(p) ? std::get<MarkovParams>(p).d : 0);
    const ScoredModel scored = bic_score(p, data);
    ctx.emit("scored.json", scored_model_to_json(scored).dump(2) + "\n");
    ctx.finish();
    return 0;
  }

  if (sub == "infer") {
    ctx.note_input(opt.model);
    const AnyParams p = read_model_json(opt.model);
    const bool gaussian = std::holds_alternative<GaussianParams>(p);
    const Dataset data = load_data(ctx, opt.data, gaussian ? "gaussian" : "markov",
                                   gaussian ? 0 : std::get<MarkovParams>(p).d);
    std::ostringstream out;
    if (gaussian) {
      const GaussianParams& g = std::get<GaussianParams>(p);
      const std::map<int, std::string> names = vertex_names(g.tree);
      const int m = g.tree.leaf_count();
      if (data.observed_count() != m) throw DataError("dataset does not match the model leaves");
      for (long r = 0; r < data.n(); ++r) {
        const GaussianPosterior post =
            infer_hidden(g, data.values.row(r).head(m).transpose());
        Json j;
        j["row"] = r;
        Json hv = Json::object();
        for (const auto& [v, mean] : post.mean)
          hv[names.at(v)] = Json{{"mean", mean}, {"var", post.var.at(v)}};
        j["posterior"] = std::move(hv);
        out << j.dump() << '\n';
      }
    } else {
      const MarkovParams& q = std::get<MarkovParams>(p);
      const std::map<int, std::string> names = vertex_names(q.tree);
      const int m = q.tree.leaf_count();
      if (data.observed_count() != m) throw DataError("dataset does not match the model leaves");
      for (long r = 0; r < data.n(); ++r) {
        std::vector<int> row(m);
        for (int i = 0; i < m; ++i) row[i] = data.state(r, i);
        const DiscretePosterior post = infer_hidden(q, row);
        Json j;
        j["row"] = r;
        j["loglik"] = post.row_loglik;
        Json hv = Json::object();
        Json mp = Json::object();
        for (const auto& [v, dist] : post.marginals) {
          hv[names.at(v)] = std::vector<double>(dist.data(), dist.data() + dist.size());
          mp[names.at(v)] = post.max_product_states.at(v);
        }
        j["posterior"] = std::move(hv);
        j["map"] = std::move(mp);
        out << j.dump() << '\n';
      }
    }
    ctx.emit("posteriors.jsonl", out.str());
    ctx.finish();
    return 0;
  }

  if (sub == "test-invariants") {
    const Dataset data = load_data(ctx, opt.data, opt.kind, opt.states);
    ctx.note_input(opt.tree);
    const NewickTree nt = newick_parse(read_text_file(opt.tree));
    const SecondOrderKind sk = opt.kind == "gaussian" ? SecondOrderKind::gaussian_correlation
                                                      : SecondOrderKind::markov_tau;
    InvariantReport rep;
    if (opt.bootstrap > 0)
      rep = tetrad_bootstrap(data, sk, nt.tree, opt.bootstrap, ctx.seed);
    else
      rep = tetrad_residuals(empirical_second_order(data, sk), nt.tree);
    if (opt.kind == "markov") {
      const int m = nt.tree.leaf_count();
      for (const Edge& e : nt.tree.edges()) {
        const Split sp = edge_split(nt.tree, e);
        std::vector<int> side;
        for (int k = 1; k <= m; ++k)
          if (sp & (Split{1} << (k - 1))) side.push_back(k);
        if (side.empty() || static_cast<int>(side.size()) == m) continue;
        rep.splits.push_back(edge_rank_test(data, side, data.d));
      }
    }
    ctx.emit("invariants.jsonl", invariant_report_jsonl(rep));
    ctx.emit("summary.txt", invariant_report_table(rep));
    ctx.finish();
    return 0;
  }

  throw DataError("unknown subcommand " + sub);
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"latent tree models: simulation, learning, scoring, diagnostics"};
  app.require_subcommand(1);
  Options opt;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--out", opt.out, "output directory")->required();
    sub->add_option("--seed", opt.seed, "random seed (generated and logged when omitted)");
    return sub;
  };
  const auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", opt.data, "dataset CSV")->required();
    sub->add_option("--kind", opt.kind, "gaussian|markov")
        ->check(CLI::IsMember({"gaussian", "markov"}));
    sub->add_option("--states", opt.states, "state count for discrete data");
    return sub;
  };

  {
    CLI::App* s = add_common(app.add_subcommand("simulate", "draw samples from a model"));
    s->add_option("--model", opt.model, "model JSON")->required();
    s->add_option("--n", opt.n, "sample count");
    s->add_flag("--hidden", opt.hidden, "include hidden-vertex columns");
  }
  add_data(add_common(app.add_subcommand("learn-nj", "distance-based structure recovery")));
  add_data(add_common(app.add_subcommand("learn-cl", "Chow-Liu tree of the observed variables")));
  {
    CLI::App* s = add_data(add_common(app.add_subcommand("em", "EM on a fixed tree")));
    s->add_option("--tree", opt.tree, "Newick tree")->required();
    s->add_option("--init-model", opt.init_model, "initial parameters (JSON)");
    s->add_option("--tol", opt.tol, "log-likelihood gain tolerance");
    s->add_option("--max-iter", opt.max_iter, "maximum EM iterations");
    s->add_option("--restarts", opt.restarts, "random restarts");
  }
  {
    CLI::App* s = add_data(add_common(app.add_subcommand("learn-sem", "structural EM")));
    s->add_option("--init-model", opt.init_model, "initial model (JSON; default: learn-nj)");
    s->add_option("--tol", opt.tol, "log-likelihood gain tolerance");
    s->add_option("--max-iter", opt.max_iter, "maximum inner EM iterations");
    s->add_option("--restarts", opt.restarts, "random restarts");
    s->add_option("--max-outer", opt.max_outer, "maximum structure moves");
    s->add_option("--inner-iters", opt.inner_iters, "EM iterations between moves");
    s->add_flag("--trivalent", opt.trivalent, "restrict output to a trivalent tree");
  }
  {
    CLI::App* s = add_common(app.add_subcommand("score", "BIC score of a model on data"));
    s->add_option("--model", opt.model, "model JSON")->required();
    s->add_option("--data", opt.data, "dataset CSV")->required();
  }
  {
    CLI::App* s = add_common(app.add_subcommand("infer", "hidden-vertex posteriors per row"));
    s->add_option("--model", opt.model, "model JSON")->required();
    s->add_option("--data", opt.data, "dataset CSV")->required();
  }
  {
    CLI::App* s = add_data(add_common(
        app.add_subcommand("test-invariants", "tetrad and edge-rank diagnostics")));
    s->add_option("--tree", opt.tree, "hypothesis tree (Newick)")->required();
    s->add_option("--bootstrap", opt.bootstrap, "bootstrap replicates for residual bands");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    return dispatch(app.get_subcommands().front()->get_name(), opt);
  } catch (const DataError& e) {
    std::cerr << Json{{"error", "data"}, {"message", e.what()}}.dump() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    const Json diag{{"error", "numerical"}, {"message", e.what()}};
    std::cerr << diag.dump() << "\n";
    if (!opt.out.empty() && fs::exists(opt.out))
      write_text_file((fs::path(opt.out) / "diagnostics.json").string(), diag.dump(2) + "\n");
    return 4;
  } catch (const std::exception& e) {
    std::cerr << Json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 4;
  }
}

}  // namespace arbor
