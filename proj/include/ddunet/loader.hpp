#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "ddunet/data.hpp"
#include "ddunet/tensor.hpp"

namespace ddunet {

struct Batch {
  Tensor<float> images;               // (B, 3, S, S)
  Tensor<float> labels;               // (B, 1, S, S), 0/1
  std::vector<std::uint8_t> masks;    // same labels as bytes
  std::vector<std::size_t> records;   // indices into DatasetIndex::records
  std::vector<SampleTag> tags;
};

struct BatchRequest {
  std::vector<std::size_t> records;
  std::vector<bool> hflip;  // empty = no flips
};

/// Decodes and stacks the samples of one request.
Batch assemble_batch(const DatasetIndex& index, const BatchRequest& request, std::size_t size);

/// Delivers batches for a fixed list of requests in request order. With
/// `prefetch` > 0 a worker thread decodes up to that many batches ahead
/// through a bounded queue; with 0 every batch is decoded on the caller's
/// thread when asked for. Worker exceptions resurface from next().
class BatchLoader {
 public:
  BatchLoader(const DatasetIndex& index, std::vector<BatchRequest> requests, std::size_t size, std::size_t prefetch);
  ~BatchLoader();
  BatchLoader(const BatchLoader&) = delete;
  BatchLoader& operator=(const BatchLoader&) = delete;

  std::optional<Batch> next();

 private:
  void work();

  const DatasetIndex& index_;
  std::vector<BatchRequest> requests_;
  std::size_t size_;
  std::size_t capacity_;
  std::size_t delivered_ = 0;

  std::mutex mutex_;
  std::condition_variable changed_;
  std::deque<Batch> queue_;
  std::exception_ptr error_;
  bool stop_ = false;
  bool worker_done_ = false;
  std::thread worker_;
};

/// Splits `ids` into consecutive requests of at most `batch_size` records;
/// the last one may be short.
std::vector<BatchRequest> make_requests(const std::vector<std::size_t>& ids, std::size_t batch_size,
                                        const std::vector<bool>& hflip = {});

}  // namespace ddunet
