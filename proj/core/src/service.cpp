#include "attune/service.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "attune/errors.hpp"
#include "attune/image_io.hpp"
#include "attune/log.hpp"
#include "attune/ops.hpp"

ATTUNE_NAMESPACE_BEGIN

using nlohmann::json;
namespace fs = std::filesystem;

std::pair<std::string, int> parse_bind(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == address.size()) {
    throw ContractError("bind address must be host:port, got '" + address + "'");
  }
  const std::string host = address.substr(0, colon);
  const std::string port_text = address.substr(colon + 1);
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(port_text, &used);
    if (used != port_text.size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw ContractError("bind address has a bad port: '" + address + "'");
  }
  if (port < 0 || port > 65535) throw ContractError("bind port out of range: " + port_text);
  return {host, port};
}

std::string bind_address_from_env() {
  const char* env = std::getenv("ATTUNE_BIND");
  return env && *env ? std::string(env) : std::string(kDefaultBind);
}

namespace {

enum class TaskStatus { pending, submitted, skipped };

const char* to_string(TaskStatus s) {
  switch (s) {
    case TaskStatus::pending: return "pending";
    case TaskStatus::submitted: return "submitted";
    case TaskStatus::skipped: return "skipped";
  }
  return "?";
}

enum class JobStatus { idle, running, done, failed };

const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::idle: return "idle";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "?";
}

struct JobState {
  JobStatus status = JobStatus::idle;
  std::string kind = "finetune";
  std::size_t epoch = 0;
  std::size_t max_epochs = 0;
  std::vector<EpochRecord> history;
  std::vector<std::string> log;
  std::string error;
  json result;
};

std::int64_t unix_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch()).count();
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& reason) {
  send_json(res, status, {{"error", reason}});
}

const AttributionMethod kAllMethods[] = {AttributionMethod::saliency, AttributionMethod::gradcam,
                                         AttributionMethod::occlusion};

}  // namespace

struct AnnotationService::Impl {
  ServiceOptions options;
  Experiment data;
  std::map<std::int64_t, const LabeledImage*> samples;  // train and test, by id
  std::vector<std::int64_t> task_ids;
  std::size_t rows = 0;
  std::size_t cols = 0;

  mutable std::mutex model_mutex;
  std::shared_ptr<const BayesianNetwork> current;
  std::shared_ptr<const BayesianNetwork> before;  // pre-fine-tune model of the last finished job
  fs::path current_path;

  std::mutex store_mutex;
  FeedbackStore store;
  std::set<std::int64_t> skipped;
  std::map<std::int64_t, std::int64_t> updated_at;
  std::ofstream journal;
  std::size_t journal_entries = 0;

  std::mutex job_mutex;
  std::condition_variable job_done;
  JobState job;
  std::thread worker;
  std::atomic<bool> cancel{false};

  httplib::Server server;
  std::thread server_thread;

  Impl(ServiceOptions opts, Experiment exp, const fs::path& checkpoint)
      : options(std::move(opts)), data(std::move(exp)) {
    options.config.validate();
    if (data.train.empty()) throw ContractError("annotation service: empty training set");
    for (const LabeledImage& img : data.train) samples[img.sample_id] = &img;
    for (const LabeledImage& img : data.test) samples[img.sample_id] = &img;
    rows = data.train.front().pixels.dim(1);
    cols = data.train.front().pixels.dim(2);
    for (std::size_t i : select_for_annotation(data.train.size(), options.config.feedback_fraction,
                                               options.config.seed)) {
      task_ids.push_back(data.train[i].sample_id);
    }

    fs::create_directories(options.state_dir / "checkpoints");
    Checkpoint ck = load_checkpoint(checkpoint);
    current = std::make_shared<const BayesianNetwork>(std::move(ck.model));
    current_path = fs::absolute(checkpoint);
    write_file_atomic(options.state_dir / "CURRENT", current_path.string() + "\n");
    recover_store();
  }

  // ------------------------------------------------------------ persistence

  fs::path store_path() const { return options.state_dir / "feedback.json"; }
  fs::path skipped_path() const { return options.state_dir / "skipped.json"; }
  fs::path journal_path() const { return options.state_dir / "feedback.journal"; }

  void apply_entry(const json& entry) {
    const auto id = entry.at("sample_id").get<std::int64_t>();
    if (entry.value("skip", false)) {
      skipped.insert(id);
      store.erase(id);
    } else {
      const auto runs = entry.at("mask_rle").get<std::vector<std::int64_t>>();
      store.put(id, decode_rle(runs, rows, cols));
      skipped.erase(id);
    }
    updated_at[id] = entry.value("time", std::int64_t{0});
  }

  void recover_store() {
    if (fs::exists(store_path())) store = FeedbackStore::load(store_path(), rows, cols);
    if (fs::exists(skipped_path())) {
      for (std::int64_t id : json::parse(read_file(skipped_path())).get<std::vector<std::int64_t>>()) {
        skipped.insert(id);
      }
    }
    if (fs::exists(journal_path())) {
      std::ifstream in(journal_path());
      std::string line;
      std::size_t replayed = 0;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
          apply_entry(json::parse(line));
          ++replayed;
        } catch (const std::exception& e) {
          // A torn final line from a crash mid-append; earlier lines are intact.
          log_warning(std::string("feedback journal: dropping unreadable entry: ") + e.what());
        }
      }
      if (replayed > 0) log_info("feedback journal: replayed " + std::to_string(replayed) + " entries");
    }
    compact();
  }

  // Caller holds store_mutex (or is the constructor).
  void compact() {
    if (journal.is_open()) journal.close();
    store.save(store_path());
    write_file_atomic(skipped_path(), json(std::vector<std::int64_t>(skipped.begin(), skipped.end())).dump());
    journal.open(journal_path(), std::ios::trunc);
    if (!journal) throw Error("cannot open feedback journal " + journal_path().string());
    journal_entries = 0;
  }

  // Caller holds store_mutex.
  void append(const json& entry) {
    journal << entry.dump() << '\n';
    journal.flush();
    if (!journal) throw Error("feedback journal write failed");
    ++journal_entries;
  }

  // ------------------------------------------------------------ helpers

  std::shared_ptr<const BayesianNetwork> model() const {
    std::lock_guard lock(model_mutex);
    return current;
  }

  const LabeledImage* sample(std::int64_t id) const {
    auto it = samples.find(id);
    return it == samples.end() ? nullptr : it->second;
  }

  bool is_task(std::int64_t id) const { return std::find(task_ids.begin(), task_ids.end(), id) != task_ids.end(); }

  TaskStatus status_of(std::int64_t id) const {
    if (store.contains(id)) return TaskStatus::submitted;
    if (skipped.count(id)) return TaskStatus::skipped;
    return TaskStatus::pending;
  }

  static std::size_t scale_of(const httplib::Request& req) {
    if (!req.has_param("scale")) return 1;
    const int s = std::atoi(req.get_param_value("scale").c_str());
    return static_cast<std::size_t>(std::clamp(s, 1, 32));
  }

  static AttributionMethod method_of(const httplib::Request& req) {
    return attribution_method_from_string(req.has_param("method") ? req.get_param_value("method") : "saliency");
  }

  Image8 overlay(const BayesianNetwork& net, const LabeledImage& img, AttributionMethod method) const {
    const AttributionMap map = explain(method, net, img.pixels);
    return render_overlay(img.pixels, display_map(map));
  }

  static void send_png(httplib::Response& res, const Image8& image) {
    res.status = 200;
    res.set_content(encode_png(image), "image/png");
  }

  json job_json() const {
    json history = json::array();
    for (const EpochRecord& e : job.history) {
      history.push_back({{"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"validation_f1", e.validation_f1},
                         {"evidence_positions", e.evidence_positions}});
    }
    return {{"kind", job.kind},       {"status", to_string(job.status)}, {"epoch", job.epoch},
            {"max_epochs", job.max_epochs}, {"history", history},      {"log", job.log},
            {"error", job.error},     {"result", job.result}};
  }

  // ------------------------------------------------------------ handlers

  void get_tasks(const httplib::Request& req, httplib::Response& res) {
    const auto net = model();
    std::vector<const LabeledImage*> imgs;
    for (std::int64_t id : task_ids) imgs.push_back(sample(id));
    Tensor images(Shape{imgs.size(), 1, rows, cols});
    const std::size_t per = rows * cols;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      std::copy_n(imgs[i]->pixels.data(), per, images.data() + i * per);
    }
    const Tensor probs = imgs.empty() ? Tensor() : softmax_rows(mean_logits(*net, images));
    const std::string filter = req.has_param("status") ? req.get_param_value("status") : "";

    json tasks = json::array();
    std::size_t pending = 0;
    std::lock_guard lock(store_mutex);
    for (std::size_t i = 0; i < task_ids.size(); ++i) {
      const std::int64_t id = task_ids[i];
      const TaskStatus st = status_of(id);
      if (st == TaskStatus::pending) ++pending;
      if (!filter.empty() && filter != to_string(st)) continue;
      const std::size_t k = probs.dim(1);
      const Real* p = probs.data() + i * k;
      const auto pred = static_cast<std::size_t>(std::max_element(p, p + k) - p);
      json t = {{"sample_id", id},
                {"status", to_string(st)},
                {"label", imgs[i]->label},
                {"predicted", pred},
                {"confidence", p[pred]},
                {"rows", rows},
                {"cols", cols}};
      if (auto it = updated_at.find(id); it != updated_at.end()) t["updated_at"] = it->second;
      tasks.push_back(std::move(t));
    }
    send_json(res, 200, {{"tasks", tasks}, {"pending", pending}, {"total", task_ids.size()}});
  }

  void get_sample(const httplib::Request& req, httplib::Response& res) {
    const LabeledImage* img = sample(std::stoll(req.matches[1]));
    if (!img) return send_error(res, 404, "unknown sample");
    send_png(res, upscale(to_gray8(img->pixels), scale_of(req)));
  }

  void get_explanation(const httplib::Request& req, httplib::Response& res) {
    const LabeledImage* img = sample(std::stoll(req.matches[1]));
    if (!img) return send_error(res, 404, "unknown sample");
    AttributionMethod method;
    try {
      method = method_of(req);
    } catch (const ContractError& e) {
      return send_error(res, 400, e.what());
    }
    send_png(res, upscale(overlay(*model(), *img, method), scale_of(req)));
  }

  void get_store(const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(store_mutex);
    res.status = 200;
    res.set_content(store.to_json(), "application/json");
  }

  void get_feedback(const httplib::Request& req, httplib::Response& res) {
    const std::int64_t id = std::stoll(req.matches[1]);
    std::lock_guard lock(store_mutex);
    const BinaryMask* m = store.find(id);
    if (!m) return send_error(res, 404, "no feedback for sample " + std::to_string(id));
    send_json(res, 200,
              {{"sample_id", id},
               {"mask_rle", encode_rle(*m)},
               {"rows", rows},
               {"cols", cols},
               {"status", to_string(status_of(id))}});
  }

  void post_feedback(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return send_error(res, 400, "body is not JSON");
    }
    if (!body.is_object() || !body.contains("sample_id") || !body["sample_id"].is_number_integer()) {
      return send_error(res, 422, "sample_id must be an integer");
    }
    const auto id = body["sample_id"].get<std::int64_t>();
    if (!is_task(id)) return send_error(res, 404, "sample " + std::to_string(id) + " is not an annotation task");

    const bool skip = body.contains("skip") && body["skip"].is_boolean() && body["skip"].get<bool>();
    BinaryMask mask;
    std::vector<std::int64_t> runs;
    if (!skip) {
      if (!body.contains("mask_rle") || !body["mask_rle"].is_array()) {
        return send_error(res, 422, "mask_rle must be an array of run lengths");
      }
      for (const json& r : body["mask_rle"]) {
        if (!r.is_number_integer()) return send_error(res, 422, "run lengths must be integers");
        runs.push_back(r.get<std::int64_t>());
      }
      try {
        mask = decode_rle(runs, rows, cols);
      } catch (const FormatError& e) {
        return send_error(res, 422, e.what());
      }
    }

    json entry = {{"sample_id", id}, {"time", unix_seconds()}};
    if (skip) {
      entry["skip"] = true;
    } else {
      entry["mask_rle"] = encode_rle(mask);
    }
    json reply;
    {
      std::lock_guard lock(store_mutex);
      append(entry);
      apply_entry(entry);
      if (journal_entries >= options.compact_every) compact();
      reply = {{"sample_id", id}, {"status", to_string(status_of(id))}, {"store_size", store.size()}};
      if (!skip) {
        reply["mask_rle"] = encode_rle(*store.find(id));
        reply["popcount"] = store.find(id)->popcount();
      }
    }
    if (!skip && options.queue) options.queue->submit(id, mask);
    send_json(res, 200, reply);
  }

  void post_finetune(const httplib::Request& req, httplib::Response& res) {
    TrainConfig cfg = options.config;
    if (!req.body.empty()) {
      try {
        const json overrides = json::parse(req.body);
        if (!overrides.is_object()) return send_error(res, 422, "overrides must be a JSON object");
        for (const auto& [key, value] : overrides.items()) {
          cfg.set(key, value.is_string() ? value.get<std::string>() : value.dump());
        }
        cfg.validate();
      } catch (const json::exception&) {
        return send_error(res, 400, "body is not JSON");
      } catch (const ContractError& e) {
        return send_error(res, 422, e.what());
      }
    }

    std::unique_lock lock(job_mutex);
    if (job.status == JobStatus::running) return send_error(res, 409, "a job is already running");
    FeedbackStore snapshot;
    {
      std::lock_guard store_lock(store_mutex);
      snapshot = store;
    }
    if (snapshot.empty()) return send_error(res, 412, "feedback store is empty");
    if (worker.joinable()) worker.join();
    job = JobState{};
    job.status = JobStatus::running;
    job.max_epochs = cfg.finetune_epochs;
    job.log.push_back("fine-tuning with " + std::to_string(snapshot.size()) + " feedback masks");
    const json reply = job_json();
    worker = std::thread([this, cfg, snapshot = std::move(snapshot)] { run_finetune(cfg, snapshot); });
    lock.unlock();
    send_json(res, 202, reply);
  }

  void run_finetune(const TrainConfig& cfg, const FeedbackStore& snapshot) {
    try {
      const auto start_model = model();
      FitHooks hooks;
      hooks.cancel = &cancel;
      hooks.on_epoch = [this](const EpochRecord& rec) {
        std::lock_guard lock(job_mutex);
        job.epoch = rec.epoch;
        job.history.push_back(rec);
        job.log.push_back("epoch " + std::to_string(rec.epoch) + ": validation F1 " +
                          std::to_string(rec.validation_f1) + ", evidence positions " +
                          std::to_string(rec.evidence_positions));
      };
      TrainResult tuned = finetune(*start_model, snapshot, cfg, data.train, data.validation, hooks);

      fs::path path;
      for (std::size_t k = 1;; ++k) {
        path = options.state_dir / "checkpoints" / ("finetune-" + std::to_string(k) + ".bcnn");
        if (!fs::exists(path)) break;
      }
      save_checkpoint(path, tuned.model, tuned.metadata);

      const MetricsReport pre = evaluate(*start_model, data.test, options.overlap_masks, cfg, kAllMethods);
      const MetricsReport post = evaluate(tuned.model, data.test, options.overlap_masks, cfg, kAllMethods);
      json delta = {{"accuracy", post.classification.accuracy - pre.classification.accuracy},
                    {"f1", post.classification.f1 - pre.classification.f1}};
      for (const auto& [method, score] : post.overlaps) {
        if (auto it = pre.overlaps.find(method); it != pre.overlaps.end()) {
          delta["overlap_" + method] = score.value - it->second.value;
        }
      }

      write_file_atomic(options.state_dir / "CURRENT", fs::absolute(path).string() + "\n");
      {
        std::lock_guard lock(model_mutex);
        before = start_model;
        current = std::make_shared<const BayesianNetwork>(std::move(tuned.model));
        current_path = fs::absolute(path);
      }
      std::lock_guard lock(job_mutex);
      job.result = {{"checkpoint", fs::absolute(path).string()},
                    {"best_epoch", tuned.metadata.epoch},
                    {"before", json::parse(pre.to_json())},
                    {"after", json::parse(post.to_json())},
                    {"delta", delta}};
      job.status = JobStatus::done;
      job.log.push_back("done: " + path.filename().string());
    } catch (const std::exception& e) {
      std::lock_guard lock(job_mutex);
      job.status = JobStatus::failed;
      job.error = e.what();
      job.log.push_back(std::string("failed: ") + e.what());
      log(LogLevel::error, std::string("fine-tune job failed: ") + e.what());
    }
    job_done.notify_all();
  }

  void get_job(const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(job_mutex);
    send_json(res, 200, job_json());
  }

  void get_compare(const httplib::Request& req, httplib::Response& res) {
    const LabeledImage* img = sample(std::stoll(req.matches[1]));
    if (!img) return send_error(res, 404, "unknown sample");
    AttributionMethod method;
    try {
      method = method_of(req);
    } catch (const ContractError& e) {
      return send_error(res, 400, e.what());
    }
    std::shared_ptr<const BayesianNetwork> pre, post;
    {
      std::lock_guard lock(model_mutex);
      pre = before;
      post = current;
    }
    if (!pre) return send_error(res, 404, "no completed fine-tune to compare against");
    const std::size_t s = scale_of(req);
    send_png(res, side_by_side(upscale(overlay(*pre, *img, method), s), upscale(overlay(*post, *img, method), s),
                               2 * s));
  }

  void get_metrics(const httplib::Request&, httplib::Response& res) {
    std::lock_guard lock(job_mutex);
    json body = {{"status", to_string(job.status)}};
    if (job.status == JobStatus::done) {
      body["before"] = job.result["before"];
      body["after"] = job.result["after"];
      body["delta"] = job.result["delta"];
    } else {
      body["before"] = nullptr;
      body["after"] = nullptr;
      body["delta"] = nullptr;
    }
    send_json(res, 200, body);
  }

  // ------------------------------------------------------------ wiring

  template <class Handler>
  httplib::Server::Handler guard(Handler h) {
    return [this, h](const httplib::Request& req, httplib::Response& res) {
      try {
        (this->*h)(req, res);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    };
  }

  void routes() {
    server.Get("/api/tasks", guard(&Impl::get_tasks));
    server.Get(R"(/api/samples/(-?\d+))", guard(&Impl::get_sample));
    server.Get(R"(/api/explanations/(-?\d+))", guard(&Impl::get_explanation));
    server.Get("/api/feedback", guard(&Impl::get_store));
    server.Get(R"(/api/feedback/(-?\d+))", guard(&Impl::get_feedback));
    server.Post("/api/feedback", guard(&Impl::post_feedback));
    server.Post("/api/finetune", guard(&Impl::post_finetune));
    server.Get("/api/job", guard(&Impl::get_job));
    server.Get(R"(/api/compare/(-?\d+))", guard(&Impl::get_compare));
    server.Get("/api/metrics", guard(&Impl::get_metrics));
    if (options.static_dir && !server.set_mount_point("/", options.static_dir->string())) {
      throw Error("cannot serve static files from " + options.static_dir->string());
    }
  }

  void shutdown() {
    cancel = true;
    server.stop();
    if (server_thread.joinable()) server_thread.join();
    if (worker.joinable()) worker.join();
  }
};

AnnotationService::AnnotationService(ServiceOptions options, Experiment data, const fs::path& checkpoint)
    : impl_(std::make_unique<Impl>(std::move(options), std::move(data), checkpoint)) {
  impl_->routes();
}

AnnotationService::~AnnotationService() { impl_->shutdown(); }

int AnnotationService::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  log_info("annotation service listening on " + host + ":" + std::to_string(bound));
  return bound;
}

void AnnotationService::run(const std::string& host, int port) {
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  log_info("annotation service listening on " + host + ":" + std::to_string(port));
  impl_->server.listen_after_bind();
}

void AnnotationService::stop() { impl_->server.stop(); }

bool AnnotationService::wait_for_job(std::chrono::milliseconds timeout) {
  std::unique_lock lock(impl_->job_mutex);
  return impl_->job_done.wait_for(lock, timeout, [&] { return impl_->job.status != JobStatus::running; });
}

fs::path AnnotationService::current_checkpoint() const {
  std::lock_guard lock(impl_->model_mutex);
  return impl_->current_path;
}

ATTUNE_NAMESPACE_END
