#include "maproto/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace maproto {

namespace {

constexpr char kMagic[8] = {'M', 'A', 'P', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void put_string(std::ostream& o, const std::string& s) {
  put_u64(o, s.size());
  o.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const std::uint64_t n = get_u64(in);
  if (n > (std::uint64_t{1} << 34)) throw std::runtime_error("checkpoint: corrupt string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("checkpoint: truncated");
  return s;
}

}  // namespace

Archive::Entry& Archive::slot(const std::string& key) {
  auto it = index_.find(key);
  if (it != index_.end()) return entries_[it->second];
  index_[key] = entries_.size();
  entries_.push_back({key, false, {}, {}});
  return entries_.back();
}

const Archive::Entry& Archive::find(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) throw std::out_of_range("checkpoint has no entry '" + key + "'");
  return entries_[it->second];
}

void Archive::put(const std::string& key, const Tensor& t) {
  Entry& e = slot(key);
  e.is_text = false;
  e.tensor = t;
  e.text.clear();
}

void Archive::put_text(const std::string& key, const std::string& text) {
  Entry& e = slot(key);
  e.is_text = true;
  e.text = text;
  e.tensor = Tensor();
}

const Tensor& Archive::tensor(const std::string& key) const {
  const Entry& e = find(key);
  if (e.is_text) throw std::invalid_argument("checkpoint entry '" + key + "' is text, not a tensor");
  return e.tensor;
}

const std::string& Archive::text(const std::string& key) const {
  const Entry& e = find(key);
  if (!e.is_text) throw std::invalid_argument("checkpoint entry '" + key + "' is a tensor, not text");
  return e.text;
}

std::vector<std::string> Archive::keys() const { return keys_with_prefix(""); }

std::vector<std::string> Archive::keys_with_prefix(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& e : entries_)
    if (e.key.compare(0, prefix.size(), prefix) == 0) out.push_back(e.key);
  return out;
}

void Archive::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".partial";
  {
    std::ofstream o(tmp, std::ios::binary | std::ios::trunc);
    if (!o) throw std::runtime_error("cannot write checkpoint '" + tmp.string() + "'");
    o.write(kMagic, 8);
    put_u64(o, entries_.size());
    for (const auto& e : entries_) {
      put_string(o, e.key);
      o.put(e.is_text ? 'T' : 'A');
      if (e.is_text) {
        put_string(o, e.text);
        continue;
      }
      put_u64(o, e.tensor.rank());
      for (std::size_t d : e.tensor.shape()) put_u64(o, d);
      for (double v : e.tensor.storage()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(o, bits);
      }
    }
    if (!o) throw std::runtime_error("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("'" + path.string() + "' is not a checkpoint");
  Archive a;
  const std::uint64_t n = get_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string key = get_string(in);
    const int kind = in.get();
    if (kind == 'T') {
      a.put_text(key, get_string(in));
    } else if (kind == 'A') {
      const std::uint64_t rank = get_u64(in);
      if (rank > 8) throw std::runtime_error("checkpoint: corrupt rank for '" + key + "'");
      Shape s(rank);
      for (auto& d : s) d = get_u64(in);
      Tensor t(s);
      for (auto& v : t.storage()) {
        const std::uint64_t bits = get_u64(in);
        std::memcpy(&v, &bits, 8);
      }
      a.put(key, t);
    } else {
      throw std::runtime_error("checkpoint: corrupt entry '" + key + "'");
    }
  }
  return a;
}

Tensor encode_ints(const std::vector<long long>& v) {
  Tensor t({v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<double>(v[i]);
  return t;
}

std::vector<long long> decode_ints(const Tensor& t) {
  std::vector<long long> v(t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<long long>(t[i]);
  return v;
}

void save_model(Archive& a, MAProtoNet& model) {
  for (const auto& p : model.named_parameters()) a.put("param/" + p.name, p.var.value());
  for (const auto& b : model.named_buffers()) a.put("buffer/" + b.name, *b.tensor);
  std::vector<long long> cls(model.bank().class_of.begin(), model.bank().class_of.end());
  a.put("bank/class_of", encode_ints(cls));
}

void load_model(const Archive& a, MAProtoNet& model) {
  auto restore = [&](const std::string& key, Tensor& dst) {
    const Tensor& src = a.tensor(key);
    if (src.shape() != dst.shape()) {
      throw std::invalid_argument("checkpoint entry '" + key + "' has shape " + shape_str(src.shape()) +
                                  ", model expects " + shape_str(dst.shape()));
    }
    dst = src;
  };
  for (auto& p : model.named_parameters()) restore("param/" + p.name, p.var.mutable_value());
  for (auto& b : model.named_buffers()) restore("buffer/" + b.name, *b.tensor);
  const auto cls = decode_ints(a.tensor("bank/class_of"));
  if (cls.size() != model.bank().size()) throw std::invalid_argument("checkpoint prototype count mismatch");
  for (std::size_t p = 0; p < cls.size(); ++p) model.bank().class_of[p] = static_cast<int>(cls[p]);
  model.bank().validate(model.config().num_classes);
}

}  // namespace maproto
