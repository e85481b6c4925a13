// Copyright 2026 The TQT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Line-oriented text IR shared by the real-valued graph and the lowered
// integer graph:
//
//   # comment
//   c1 = conv2d(x, w1) {pad=same stride=2}
//   group c1 {bits=16 log2_t=3.5 role=acc signed=1}
//   outputs: logits
//
// Attribute keys are printed sorted; doubles use %.17g and always carry a
// '.' or exponent so they re-parse as doubles.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "tqt/core/tensor.hpp"

namespace tqt::ir {

using AttrValue = std::variant<std::int64_t, double, std::string>;

class Attrs {
 public:
  bool has(const std::string& k) const { return map_.count(k) != 0; }
  void set(const std::string& k, AttrValue v) { map_[k] = std::move(v); }
  void set(const std::string& k, double v) { map_[k] = v; }
  void set(const std::string& k, int v) { map_[k] = static_cast<std::int64_t>(v); }
  void set(const std::string& k, long v) { map_[k] = static_cast<std::int64_t>(v); }
  void set(const std::string& k, bool v) { map_[k] = static_cast<std::int64_t>(v ? 1 : 0); }
  void set(const std::string& k, const char* v) { map_[k] = std::string(v); }
  void erase(const std::string& k) { map_.erase(k); }

  std::int64_t get_int(const std::string& k) const {
    const AttrValue& v = at(k);
    if (auto* i = std::get_if<std::int64_t>(&v)) return *i;
    throw ParseError("attribute '" + k + "' must be an integer");
  }
  std::int64_t get_int(const std::string& k, std::int64_t dflt) const {
    return has(k) ? get_int(k) : dflt;
  }
  double get_double(const std::string& k) const {
    const AttrValue& v = at(k);
    if (auto* d = std::get_if<double>(&v)) return *d;
    if (auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    throw ParseError("attribute '" + k + "' must be a number");
  }
  double get_double(const std::string& k, double dflt) const { return has(k) ? get_double(k) : dflt; }
  const std::string& get_string(const std::string& k) const {
    const AttrValue& v = at(k);
    if (auto* s = std::get_if<std::string>(&v)) return *s;
    throw ParseError("attribute '" + k + "' must be a string");
  }
  /// Value printed back to text, whatever its parsed type.
  std::string get_text(const std::string& k) const;
  std::string get_string(const std::string& k, const std::string& dflt) const {
    return has(k) ? get_string(k) : dflt;
  }

  const std::map<std::string, AttrValue>& items() const noexcept { return map_; }
  bool empty() const noexcept { return map_.empty(); }
  bool operator==(const Attrs&) const = default;

 private:
  const AttrValue& at(const std::string& k) const {
    auto it = map_.find(k);
    if (it == map_.end()) throw ParseError("missing attribute '" + k + "'");
    return it->second;
  }
  std::map<std::string, AttrValue> map_;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string format_attr(const AttrValue& v) {
  if (auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (auto* d = std::get_if<double>(&v)) return format_double(*d);
  return std::get<std::string>(v);
}

inline std::string Attrs::get_text(const std::string& k) const { return format_attr(at(k)); }

inline AttrValue parse_attr_value(const std::string& s) {
  if (s.empty()) return s;
  char* end = nullptr;
  const bool looks_numeric =
      std::isdigit(static_cast<unsigned char>(s[0])) ||
      ((s[0] == '-' || s[0] == '+' || s[0] == '.') && s.size() > 1);
  if (looks_numeric) {
    if (s.find_first_of(".eEn") == std::string::npos) {
      const long long i = std::strtoll(s.c_str(), &end, 10);
      if (end && *end == '\0') return static_cast<std::int64_t>(i);
    } else {
      const double d = std::strtod(s.c_str(), &end);
      if (end && *end == '\0') return d;
    }
  }
  return s;
}

inline std::string format_shape(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_shape(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw ParseError("malformed shape '" + s + "'");
    }
    out.push_back(std::stoul(part));
  }
  if (out.empty()) throw ParseError("empty shape");
  return out;
}

struct TextNode {
  std::string id;
  std::string op;
  std::vector<std::string> inputs;
  Attrs attrs;
  int line = 0;
};

struct TextDoc {
  std::vector<TextNode> nodes;
  std::map<std::string, Attrs> groups;
  std::vector<std::string> outputs;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool valid_id(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-' ||
          c == '/' || c == ':')) {
      return false;
    }
  }
  return true;
}

inline Attrs parse_attrs(const std::string& body, const std::string& who) {
  Attrs a;
  std::stringstream ss(body);
  std::string tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ParseError(who + ": malformed attribute '" + tok + "'");
    }
    a.set(tok.substr(0, eq), parse_attr_value(tok.substr(eq + 1)));
  }
  return a;
}

/// Splits "rest {attrs}" into rest and the attrs body.
inline std::pair<std::string, std::string> split_attrs(const std::string& s, const std::string& who) {
  const auto ob = s.find('{');
  if (ob == std::string::npos) return {trim(s), ""};
  const auto cb = s.rfind('}');
  if (cb == std::string::npos || cb < ob || !trim(s.substr(cb + 1)).empty()) {
    throw ParseError(who + ": unterminated attribute block");
  }
  return {trim(s.substr(0, ob)), s.substr(ob + 1, cb - ob - 1)};
}

}  // namespace detail

inline TextDoc parse_text(const std::string& text) {
  TextDoc doc;
  std::stringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = detail::trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const std::string where = "line " + std::to_string(lineno);
    if (line.rfind("outputs:", 0) == 0) {
      std::string rest = line.substr(8);
      for (char& c : rest) {
        if (c == ',') c = ' ';
      }
      std::stringstream ss(rest);
      std::string id;
      while (ss >> id) {
        if (!detail::valid_id(id)) throw ParseError(where + ": bad output id '" + id + "'");
        doc.outputs.push_back(id);
      }
      continue;
    }
    if (line.rfind("group ", 0) == 0) {
      auto [name, body] = detail::split_attrs(line.substr(6), where);
      if (!detail::valid_id(name)) throw ParseError(where + ": bad group name '" + name + "'");
      if (doc.groups.count(name)) throw ParseError("group '" + name + "' defined twice");
      doc.groups[name] = detail::parse_attrs(body, "group '" + name + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(where + ": expected 'id = op(...)'");
    TextNode n;
    n.line = lineno;
    n.id = detail::trim(line.substr(0, eq));
    if (!detail::valid_id(n.id)) throw ParseError(where + ": bad node id '" + n.id + "'");
    const std::string who = "node '" + n.id + "'";
    auto [call, body] = detail::split_attrs(line.substr(eq + 1), who);
    const auto op = call.find('(');
    if (op == std::string::npos || call.back() != ')') {
      throw ParseError(who + ": malformed input list");
    }
    n.op = detail::trim(call.substr(0, op));
    const std::string args = call.substr(op + 1, call.size() - op - 2);
    if (args.find_first_of("()") != std::string::npos) {
      throw ParseError(who + ": malformed input list");
    }
    if (!detail::trim(args).empty()) {
      std::stringstream ss(args);
      std::string a;
      while (std::getline(ss, a, ',')) {
        a = detail::trim(a);
        if (!detail::valid_id(a)) throw ParseError(who + ": malformed input list");
        n.inputs.push_back(a);
      }
    }
    n.attrs = detail::parse_attrs(body, who);
    doc.nodes.push_back(std::move(n));
  }
  return doc;
}

inline std::string format_text(const TextDoc& doc) {
  std::ostringstream os;
  auto attrs = [&](const Attrs& a) {
    if (a.empty()) return;
    os << " {";
    bool first = true;
    for (const auto& [k, v] : a.items()) {
      os << (first ? "" : " ") << k << '=' << format_attr(v);
      first = false;
    }
    os << '}';
  };
  for (const auto& n : doc.nodes) {
    os << n.id << " = " << n.op << '(';
    for (std::size_t i = 0; i < n.inputs.size(); ++i) os << (i ? ", " : "") << n.inputs[i];
    os << ')';
    attrs(n.attrs);
    os << '\n';
  }
  for (const auto& [name, a] : doc.groups) {
    os << "group " << name;
    attrs(a);
    os << '\n';
  }
  if (!doc.outputs.empty()) {
    os << "outputs:";
    for (const auto& o : doc.outputs) os << ' ' << o;
    os << '\n';
  }
  return os.str();
}

/// Comma-separated payload for inline tensors.
template <typename T>
std::string format_data(const BasicTensor<T>& t) {
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_same_v<T, double>) {
      out += format_double(t[i]);
    } else {
      out += std::to_string(t[i]);
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> parse_data(const Shape& shape, const std::string& s, const std::string& who) {
  std::vector<T> vals;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    char* end = nullptr;
    if constexpr (std::is_same_v<T, double>) {
      vals.push_back(std::strtod(tok.c_str(), &end));
    } else {
      vals.push_back(static_cast<T>(std::strtoll(tok.c_str(), &end, 10)));
    }
    if (tok.empty() || !end || *end != '\0') throw ParseError(who + ": malformed data value '" + tok + "'");
  }
  if (vals.size() != shape_numel(shape)) {
    throw ParseError(who + ": data has " + std::to_string(vals.size()) + " values, shape needs " +
                     std::to_string(shape_numel(shape)));
  }
  return BasicTensor<T>(shape, std::move(vals));
}

}  // namespace tqt::ir
