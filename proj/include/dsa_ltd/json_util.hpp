#pragma once

#include <algorithm>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace dsa_ltd {

using json = nlohmann::json;

/// Config file content that does not match its schema.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline void require_object(const json& j, std::string_view ctx) {
    if (!j.is_object()) throw ConfigError(std::string(ctx) + ": expected a JSON object");
}

inline void reject_unknown_keys(const json& j, std::initializer_list<std::string_view> known,
                                std::string_view ctx) {
    require_object(j, ctx);
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError(std::string(ctx) + ": unknown key '" + key + "'");
}

/// Reads `key` into `dst` when present; type mismatches become ConfigError.
template <typename T>
void read_optional(const json& j, const char* key, T& dst, std::string_view ctx) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    try {
        dst = it->template get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string(ctx) + "." + key + ": " + e.what());
    }
}

}  // namespace dsa_ltd
