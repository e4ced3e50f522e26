#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attune/pipeline.hpp"

ATTUNE_NAMESPACE_BEGIN

inline constexpr const char* kDefaultBind = "127.0.0.1:8787";

/// Splits "host:port"; throws ContractError on a malformed address.
std::pair<std::string, int> parse_bind(const std::string& address);
/// ATTUNE_BIND if set, otherwise the default address.
std::string bind_address_from_env();

struct ServiceOptions {
  /// Holds feedback.json, its journal, fine-tuned checkpoints, and CURRENT.
  std::filesystem::path state_dir;
  TrainConfig config;
  /// Held-out annotated test samples for the overlap metrics.
  std::vector<FeedbackMask> overlap_masks;
  /// Served at "/" when set (the annotation UI bundle).
  std::optional<std::filesystem::path> static_dir;
  /// Journal entries between compactions of feedback.json.
  std::size_t compact_every = 32;
  /// Receives every accepted submission, for pipeline-driven annotation.
  QueueAnnotationSource* queue = nullptr;
};

/// HTTP facade over one model, one feedback store and one background job.
///
///   GET  /api/tasks                    annotation batch with status and prediction
///   GET  /api/samples/{id}             sample as PNG
///   GET  /api/explanations/{id}?method= overlay PNG for the current checkpoint
///   GET  /api/feedback                 whole store
///   GET  /api/feedback/{id}            one mask
///   POST /api/feedback                 {sample_id, mask_rle} or {sample_id, skip: true}
///   POST /api/finetune                 optional TrainConfig overrides; 202/409/412
///   GET  /api/job                      job state and progress
///   GET  /api/compare/{id}?method=     before | after overlay PNG
///   GET  /api/metrics                  before/after evaluation and deltas
///
/// Optional `scale` query parameters upscale PNG responses.
class AnnotationService {
 public:
  AnnotationService(ServiceOptions options, Experiment data, const std::filesystem::path& checkpoint);
  ~AnnotationService();
  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  /// Binds and serves on a background thread. Port 0 picks a free port.
  /// Returns the bound port; throws Error when binding fails.
  int start(const std::string& host, int port);
  /// Serves on the calling thread until stop() is called.
  void run(const std::string& host, int port);
  void stop();

  /// Blocks until no job is running or the timeout expires.
  bool wait_for_job(std::chrono::milliseconds timeout);
  std::filesystem::path current_checkpoint() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

ATTUNE_NAMESPACE_END
