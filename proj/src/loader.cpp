#include "ddunet/loader.hpp"

#include <algorithm>

#include "ddunet/errors.hpp"

namespace ddunet {

Batch assemble_batch(const DatasetIndex& index, const BatchRequest& request, std::size_t size) {
  const std::size_t b = request.records.size();
  if (b == 0) throw ContractError("assemble_batch: empty request");
  const std::size_t plane = size * size;
  Batch batch;
  batch.images = Tensor<float>({b, 3, size, size});
  batch.labels = Tensor<float>({b, 1, size, size});
  batch.masks.resize(b * plane);
  auto img = batch.images.mutable_data();
  auto lab = batch.labels.mutable_data();
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t id = request.records[i];
    const bool flip = !request.hflip.empty() && request.hflip[i];
    const SegmentationSample s = load_sample(index.records.at(id), size, flip);
    std::copy(s.image.begin(), s.image.end(), img.begin() + static_cast<long>(i * 3 * plane));
    for (std::size_t k = 0; k < plane; ++k) {
      batch.masks[i * plane + k] = s.mask[k];
      lab[i * plane + k] = static_cast<float>(s.mask[k]);
    }
    batch.records.push_back(id);
    batch.tags.push_back(s.tag);
  }
  return batch;
}

BatchLoader::BatchLoader(const DatasetIndex& index, std::vector<BatchRequest> requests, std::size_t size,
                         std::size_t prefetch)
    : index_(index), requests_(std::move(requests)), size_(size), capacity_(prefetch) {
  if (capacity_ > 0) worker_ = std::thread(&BatchLoader::work, this);
}

BatchLoader::~BatchLoader() {
  {
    std::lock_guard lock(mutex_);
    stop_ = true;
  }
  changed_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void BatchLoader::work() {
  for (const BatchRequest& request : requests_) {
    {
      std::unique_lock lock(mutex_);
      changed_.wait(lock, [&] { return stop_ || queue_.size() < capacity_; });
      if (stop_) break;
    }
    try {
      Batch batch = assemble_batch(index_, request, size_);
      std::lock_guard lock(mutex_);
      queue_.push_back(std::move(batch));
    } catch (...) {
      std::lock_guard lock(mutex_);
      error_ = std::current_exception();
      break;
    }
    changed_.notify_all();
  }
  {
    std::lock_guard lock(mutex_);
    worker_done_ = true;
  }
  changed_.notify_all();
}

std::optional<Batch> BatchLoader::next() {
  if (delivered_ == requests_.size()) return std::nullopt;
  if (capacity_ == 0) return assemble_batch(index_, requests_[delivered_++], size_);
  std::unique_lock lock(mutex_);
  changed_.wait(lock, [&] { return !queue_.empty() || error_ || worker_done_; });
  if (queue_.empty()) {
    if (error_) std::rethrow_exception(error_);
    throw ContractError("batch loader worker stopped early");
  }
  Batch batch = std::move(queue_.front());
  queue_.pop_front();
  ++delivered_;
  lock.unlock();
  changed_.notify_all();
  return batch;
}

std::vector<BatchRequest> make_requests(const std::vector<std::size_t>& ids, std::size_t batch_size,
                                        const std::vector<bool>& hflip) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<BatchRequest> out;
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, ids.size());
    BatchRequest r;
    r.records.assign(ids.begin() + static_cast<long>(start), ids.begin() + static_cast<long>(end));
    if (!hflip.empty()) r.hflip.assign(hflip.begin() + static_cast<long>(start), hflip.begin() + static_cast<long>(end));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ddunet
