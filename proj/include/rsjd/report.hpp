#pragma once

#include <fstream>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "rsjd/common.hpp"

// Machine-readable experiment summaries. nlohmann::json keeps object keys
// sorted and prints doubles shortest-round-trip, so a summary built from the
// same config and seed renders byte-identically; nothing time- or
// host-dependent may be added to one.

namespace rsjd {

using Json = nlohmann::json;

// Pass/fail entries of one experiment run. `all_pass` drives the exit code.
struct CheckLedger {
    Json entries = Json::array();
    bool all_pass = true;

    void add(const std::string& name, bool pass, double measured, double band,
             const std::string& note = "") {
        Json e;
        e["name"] = name;
        e["pass"] = pass;
        e["measured"] = measured;
        e["band"] = band;
        if (!note.empty()) e["note"] = note;
        entries.push_back(std::move(e));
        all_pass = all_pass && pass;
    }
};

inline std::string render_summary(const Json& j) { return j.dump(2) + "\n"; }

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot open '" + path + "' for writing");
    out << content;
    require(out.good(), "write to '" + path + "' failed");
}

// ---- config readers: every access validates type and range ---------------

inline void require_known_keys(const Json& j, const std::string& where,
                               std::initializer_list<const char*> keys) {
    if (j.is_null()) return;
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : keys)
            if (it.key() == k) {
                known = true;
                break;
            }
        if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

inline double get_num(const Json& j, const std::string& key, double fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_number()) throw ConfigError("'" + key + "' must be a number");
    return j.at(key).get<double>();
}

inline long get_int(const Json& j, const std::string& key, long fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_number_integer()) throw ConfigError("'" + key + "' must be an integer");
    return j.at(key).get<long>();
}

inline bool get_bool(const Json& j, const std::string& key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_boolean()) throw ConfigError("'" + key + "' must be a boolean");
    return j.at(key).get<bool>();
}

inline std::string get_str(const Json& j, const std::string& key, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_string()) throw ConfigError("'" + key + "' must be a string");
    return j.at(key).get<std::string>();
}

inline double get_pos(const Json& j, const std::string& key, double fallback) {
    double v = get_num(j, key, fallback);
    if (!(v > 0.0)) throw ConfigError("'" + key + "' must be positive");
    return v;
}

inline long get_count(const Json& j, const std::string& key, long fallback) {
    long v = get_int(j, key, fallback);
    if (v <= 0) throw ConfigError("'" + key + "' must be a positive count");
    return v;
}

} // namespace rsjd
