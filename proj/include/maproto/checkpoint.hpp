#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "maproto/network.hpp"

namespace maproto {

/// Single-file container of named blobs, each either a tensor or a text.
/// Entries keep insertion order, so equal contents give equal bytes.
class Archive {
 public:
  void put(const std::string& key, const Tensor& t);
  void put_text(const std::string& key, const std::string& text);

  bool has(const std::string& key) const { return index_.count(key) != 0; }
  const Tensor& tensor(const std::string& key) const;
  const std::string& text(const std::string& key) const;
  std::vector<std::string> keys() const;
  /// Keys starting with `prefix`, in insertion order.
  std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

  /// Writes to a temporary file and renames it into place.
  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  struct Entry {
    std::string key;
    bool is_text = false;
    Tensor tensor;
    std::string text;
  };
  Entry& slot(const std::string& key);
  const Entry& find(const std::string& key) const;

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Stores parameters ("param/<name>"), buffers ("buffer/<name>") and the
/// prototype class assignment ("bank/class_of").
void save_model(Archive& a, MAProtoNet& model);
/// Restores everything written by save_model. The model must have been
/// built from the same configuration; shapes are checked per entry.
void load_model(const Archive& a, MAProtoNet& model);

/// Encodes integers exactly in a tensor of doubles (|v| < 2^53).
Tensor encode_ints(const std::vector<long long>& v);
std::vector<long long> decode_ints(const Tensor& t);

}  // namespace maproto
