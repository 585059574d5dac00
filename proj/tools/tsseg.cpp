// tsseg: command-line driver for the teacher/student segmentation pipeline.
//
//   tsseg train-teacher --config run.json [--epochs N]
//   tsseg pseudolabel   --config run.json [--teacher PATH]
//   tsseg train-student --config run.json [--teacher PATH] [--stages 0.1:10,...]
//   tsseg evaluate      --config run.json [--checkpoint PATH ...]
//   tsseg report        --config run.json
//   tsseg write-config  --output run.json
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include "tsseg/config.hpp"
#include "tsseg/report.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace tsseg;

namespace {

/// Usage and configuration problems map to exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string output;
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string stages;
  std::string teacher;
  std::vector<std::string> checkpoints;
};

struct Run {
  RunConfig cfg;
  fs::path out;
};

fs::path resolve_output(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("TSSEG_OUTPUT_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return p;
}

Run load_run(const Options& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  RunConfig cfg = load_run_config(o.config);
  if (!o.output.empty()) cfg.output_dir = o.output;
  if (o.seed) cfg.seed = o.seed;
  if (o.epochs) cfg.teacher.epochs = o.epochs;
  if (!o.stages.empty()) {
    try {
      cfg.schedule = parse_schedule(o.stages);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--stages: ") + e.what());
    }
  }
  cfg = with_master_seed(cfg);
  cfg.validate();
  return {cfg, resolve_output(cfg.output_dir)};
}

void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw std::runtime_error("missing " + what + ": '" + p.string() + "'");
}

struct Data {
  LabeledSet labeled, val;
  UnlabeledSet unlabeled;
};

Data load_data(const Run& run) {
  const auto& src = run.cfg.data;
  Data d;
  if (src.kind == "synthetic") {
    const fs::path dir = run.out / "corpus";
    SyntheticCorpus corpus;
    if (corpus_matches(dir, src.synthetic)) {
      corpus = load_corpus(dir);
    } else {
      corpus = generate_synthetic(src.synthetic);
      save_corpus(corpus, src.synthetic, dir);
    }
    d.labeled = std::move(corpus.labeled);
    d.val = std::move(corpus.val);
    d.unlabeled = std::move(corpus.unlabeled);
    return d;
  }
  auto labeled_cases = [&](const std::vector<std::string>& cases, LabeledSet& into) {
    for (const auto& c : cases) {
      VolumeStack s = load_volume_stack(fs::path(src.root) / c, src.layout);
      if (!s.labels) throw std::runtime_error("case '" + c + "' has no label map");
      for (size_t i = 0; i < s.slices.size(); ++i) into.push_back({std::move(s.slices[i]), std::move((*s.labels)[i])});
    }
  };
  labeled_cases(src.labeled_cases, d.labeled);
  labeled_cases(src.val_cases, d.val);
  LayoutDescriptor no_labels = src.layout;
  no_labels.label_pattern.reset();
  for (const auto& c : src.unlabeled_cases) {
    VolumeStack s = load_volume_stack(fs::path(src.root) / c, no_labels);
    for (auto& v : s.slices) d.unlabeled.push_back(std::move(v));
  }
  validate_set(d.labeled);
  validate_set(d.val);
  validate_set(d.unlabeled);
  return d;
}

fs::path teacher_path(const Run& run, const Options& o) {
  return o.teacher.empty() ? run.out / "teacher.ckpt" : fs::path(o.teacher);
}

int cmd_train_teacher(const Options& o) {
  const Run run = load_run(o);
  const Data data = load_data(run);
  if (data.labeled.empty()) throw std::runtime_error("no labeled samples to train the teacher on");
  TeacherResult res = train_teacher(data.labeled, data.val, run.cfg.backbone, run.cfg.teacher, run.cfg.loss);
  res.checkpoint.save(run.out / "teacher.ckpt");
  write_text_atomic(run.out / "teacher_history.jsonl", history_to_jsonl(res.history));
  std::cout << "teacher: " << res.history.size() << " epochs, best epoch " << res.best_epoch << ", digest "
            << res.checkpoint.digest() << "\n";
  if (res.diverged) {
    std::cerr << "error: teacher training diverged; kept the best finite checkpoint\n";
    return 2;
  }
  return 0;
}

/// Loads the cached pool when it matches the teacher, otherwise rebuilds it.
std::vector<PseudoLabeledSample> ensure_pool(const Run& run, const Checkpoint& teacher, const UnlabeledSet& unlabeled,
                                             bool verbose) {
  const fs::path dir = run.out / "pseudolabels";
  const std::string digest = teacher.digest();
  const CacheStatus status = check_pseudolabel_cache(dir, digest, unlabeled);
  if (status.hit) {
    if (verbose) std::cout << "pseudolabel: cache hit (" << unlabeled.size() << " samples)\n";
    return load_pseudolabel_cache(dir, unlabeled);
  }
  if (fs::exists(dir / "index.json")) std::cerr << "warning: " << status.reason << "; rebuilding pseudo-label cache\n";
  auto pool = generate_pseudolabels(unlabeled, teacher, run.cfg.pseudolabel.passes, run.cfg.pseudolabel.seed);
  save_pseudolabel_cache(dir, pool, digest);
  if (verbose) std::cout << "pseudolabel: generated " << pool.size() << " samples\n";
  return pool;
}

int cmd_pseudolabel(const Options& o) {
  const Run run = load_run(o);
  const fs::path tp = teacher_path(run, o);
  require(tp, "teacher checkpoint");
  const Checkpoint teacher = Checkpoint::load(tp);
  const Data data = load_data(run);
  const auto pool = ensure_pool(run, teacher, data.unlabeled, true);
  write_text_atomic(run.out / "ranking.csv", ranking_csv(pool));
  return 0;
}

int cmd_train_student(const Options& o) {
  const Run run = load_run(o);
  const fs::path tp = teacher_path(run, o);
  require(tp, "teacher checkpoint");
  const Checkpoint teacher = Checkpoint::load(tp);
  if (!(teacher.config == run.cfg.backbone))
    std::cerr << "warning: teacher architecture differs from the config; the student follows the teacher\n";
  const Data data = load_data(run);
  auto pool = ensure_pool(run, teacher, data.unlabeled, false);
  const CurriculumResult res = run_curriculum(data.labeled, std::move(pool), data.val, teacher, run.cfg.schedule,
                                              run.cfg.loss, run.cfg.student, run.cfg.pseudolabel.agreement_damping);
  res.student.save(run.out / "student.ckpt");
  write_text_atomic(run.out / "stage_reports.jsonl", stage_reports_to_jsonl(res.reports));
  write_text_atomic(run.out / "student_history.jsonl", history_to_jsonl(res.history));
  for (const auto& r : res.reports)
    std::cout << "stage " << r.stage << ": fraction " << r.fraction << ", samples " << r.samples_used
              << ", best val dice " << r.best_val_dice << " (gain " << r.dice_gain << ")\n";
  if (res.aborted) {
    std::cerr << "error: student training diverged; stopped early\n";
    return 2;
  }
  return 0;
}

nlohmann::json metrics_record(const std::string& name, const fs::path& path, const Checkpoint& ck,
                              const LabeledSet& val, const LossConfig& loss) {
  const EvalResult r = evaluate_model(ck.params, ck.config, val, loss);
  OverlapCounter counter(ck.config.num_classes);
  for (const auto& s : val) counter.add(mask_from_argmax(forward(s.volume.image, ck.params, ck.config).probs), s.mask);
  const ClasswiseScores all = counter.scores(default_class_names(), true);
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& c : all.classes) classes[c.name] = {{"dice", c.dice}, {"iou", c.iou}};
  return {{"model", name},
          {"checkpoint", path.filename().string()},
          {"digest", ck.digest()},
          {"split", "val"},
          {"samples", val.size()},
          {"classes", classes},
          {"macro_dice", r.dice},
          {"macro_iou", counter.scores(default_class_names(), false).macro_iou},
          {"accuracy", r.accuracy},
          {"loss", r.loss},
          {"iou_dice_consistent", identity_violations(all, 1e-9).empty()}};
}

int cmd_evaluate(const Options& o) {
  const Run run = load_run(o);
  std::vector<fs::path> paths;
  for (const auto& c : o.checkpoints) paths.emplace_back(c);
  if (paths.empty()) {
    for (const char* n : {"teacher.ckpt", "student.ckpt"})
      if (fs::exists(run.out / n)) paths.push_back(run.out / n);
    if (paths.empty()) throw std::runtime_error("missing checkpoint: no teacher.ckpt or student.ckpt in '" + run.out.string() + "'");
  }
  for (const auto& p : paths) require(p, "checkpoint");
  const Data data = load_data(run);
  if (data.val.empty()) throw std::runtime_error("the validation split is empty; nothing to evaluate");
  for (const auto& p : paths) {
    const std::string name = p.stem().string();
    const auto rec = metrics_record(name, p, Checkpoint::load(p), data.val, run.cfg.loss);
    write_text_atomic(run.out / ("metrics_" + name + ".json"), rec.dump(2) + "\n");
    std::cout << name << ": macro dice " << rec["macro_dice"].get<double>() << ", accuracy "
              << rec["accuracy"].get<double>() << "\n";
  }
  return 0;
}

int cmd_report(const Options& o) {
  const Run run = load_run(o);
  const fs::path tp = teacher_path(run, o), sp = run.out / "student.ckpt";
  const fs::path th = run.out / "teacher_history.jsonl", sh = run.out / "student_history.jsonl";
  require(tp, "teacher checkpoint");
  require(sp, "student checkpoint");
  require(th, "teacher history");
  require(sh, "student history");
  require(run.out / "pseudolabels" / "index.json", "pseudo-label cache (run pseudolabel first)");
  const Checkpoint teacher = Checkpoint::load(tp), student = Checkpoint::load(sp);
  const Data data = load_data(run);
  const auto pool = load_pseudolabel_cache(run.out / "pseudolabels", data.unlabeled);

  const fs::path dir = run.out / "report";
  fs::create_directories(dir);
  write_text_atomic(dir / "learning_curves.svg",
                    report::learning_curves_svg(history_from_jsonl(read_text(th)), history_from_jsonl(read_text(sh))));

  std::vector<double> conf;
  for (const auto& s : pool) conf.push_back(s.image_confidence);
  write_text_atomic(dir / "confidence.svg", report::confidence_svg(conf));

  std::vector<IndexGrid> maps;
  std::vector<double> fractions;
  for (const auto& v : data.unlabeled) {
    const Agreement a = agreement_map(forward(v.image, teacher.params, teacher.config),
                                      forward(v.image, student.params, student.config));
    maps.push_back(a.map);
    fractions.push_back(a.fraction);
  }
  write_text_atomic(dir / "agreement_histogram.svg", report::agreement_histogram_svg(fractions));
  if (maps.size() > 40) maps.resize(40);
  report::write_png(dir / "agreement_map.png", report::agreement_mosaic(maps, 8));

  std::vector<report::CasePanel> panels;
  for (size_t i = 0; i < data.val.size() && i < 4; ++i) {
    const auto& s = data.val[i];
    panels.push_back({s.volume.id, s.volume.image, s.mask.classes,
                      argmax_over_classes(forward(s.volume.image, teacher.params, teacher.config).probs),
                      argmax_over_classes(forward(s.volume.image, student.params, student.config).probs)});
  }
  report::write_png(dir / "case_panels.png", report::case_panels(panels));
  std::cout << "report: wrote 5 files to '" << dir.string() << "'\n";
  return 0;
}

int cmd_write_config(const Options& o) {
  if (o.output.empty()) throw UsageError("--output is required");
  write_text_atomic(o.output, dump_run_config(RunConfig{}));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher/student semi-supervised segmentation pipeline"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "run configuration (JSON)")->required();
    sub->add_option("--output", o.output, "output directory (overrides output_dir)");
    sub->add_option("--seed", o.seed, "master seed (overrides per-module seeds)");
  };
  auto* teacher = app.add_subcommand("train-teacher", "train the teacher on the labeled split");
  common(teacher);
  teacher->add_option("--epochs", o.epochs, "override teacher epochs")->check(CLI::PositiveNumber);

  auto* pseudo = app.add_subcommand("pseudolabel", "build the pseudo-label cache and ranking");
  common(pseudo);
  pseudo->add_option("--teacher", o.teacher, "teacher checkpoint");

  auto* student = app.add_subcommand("train-student", "run the curriculum");
  common(student);
  student->add_option("--teacher", o.teacher, "teacher checkpoint");
  student->add_option("--stages", o.stages, "schedule override, e.g. 0.5:5,1.0:5");

  auto* evaluate = app.add_subcommand("evaluate", "class-wise metrics on the validation split");
  common(evaluate);
  evaluate->add_option("--checkpoint", o.checkpoints, "checkpoint(s) to evaluate");

  auto* rep = app.add_subcommand("report", "render plots and panels");
  common(rep);
  rep->add_option("--teacher", o.teacher, "teacher checkpoint");

  auto* write = app.add_subcommand("write-config", "write the default configuration");
  write->add_option("--output", o.output, "destination file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*teacher) return cmd_train_teacher(o);
    if (*pseudo) return cmd_pseudolabel(o);
    if (*student) return cmd_train_student(o);
    if (*evaluate) return cmd_evaluate(o);
    if (*rep) return cmd_report(o);
    if (*write) return cmd_write_config(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
