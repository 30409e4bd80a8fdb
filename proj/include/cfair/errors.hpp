#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfair {

// Misuse of an API contract (e.g. backward twice on one tape).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Anything wrong with bytes or records coming from disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public DataError {
 public:
  ChecksumError(const std::string& what, std::size_t offset)
      : DataError(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class VersionError : public DataError {
 public:
  using DataError::DataError;
};

class SchemaError : public DataError {
 public:
  SchemaError(const std::string& what, std::string field)
      : DataError(what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class ValidationError : public DataError {
 public:
  ValidationError(const std::string& what, std::size_t position)
      : DataError(what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

class ScheduleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Not enough eligible records to satisfy a curation request.
class ShortageError : public std::runtime_error {
 public:
  ShortageError(const std::string& strategy, std::size_t wanted, std::size_t eligible)
      : std::runtime_error("prompt curation '" + strategy + "': wanted " + std::to_string(wanted) +
                           " records, only " + std::to_string(eligible) + " eligible"),
        strategy_(strategy) {}
  const std::string& strategy() const { return strategy_; }

 private:
  std::string strategy_;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step, double lr, std::size_t batch_id)
      : std::runtime_error(what + " at step " + std::to_string(step) + " (lr=" + std::to_string(lr) +
                           ", batch " + std::to_string(batch_id) + ")"),
        step_(step),
        lr_(lr),
        batch_id_(batch_id) {}
  std::size_t step() const { return step_; }
  double lr() const { return lr_; }
  std::size_t batch_id() const { return batch_id_; }

 private:
  std::size_t step_;
  double lr_;
  std::size_t batch_id_;
};

}  // namespace cfair
