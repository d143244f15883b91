#pragma once

// httplib-backed judge transport. Define CPPHTTPLIB_OPENSSL_SUPPORT and link
// OpenSSL before including this to enable https endpoints.

#include <regex>
#include <string>

#include "agd/judge.hpp"
#include "httplib.h"

namespace agd::judge {

struct ParsedUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline ParsedUrl split_url(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)", std::regex::icase);
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ConfigError("judge endpoint is not an http(s) URL: " + url);
  return {m[1].str(), m[2].matched ? m[2].str() : "/"};
}

class HttpTransport : public Transport {
 public:
  std::string post_json(const std::string& url, const std::string& body,
                        const std::map<std::string, std::string>& headers, double timeout_seconds) override {
    const auto u = split_url(url);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (u.origin.rfind("https", 0) == 0 || u.origin.rfind("HTTPS", 0) == 0)
      throw ConfigError("this build has no TLS support; use an http:// judge endpoint");
#endif
    httplib::Client cli(u.origin);
    const auto secs = static_cast<time_t>(timeout_seconds);
    const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    httplib::Headers h;
    std::string content_type = "application/json";
    for (const auto& [k, v] : headers) {
      if (k == "Content-Type") content_type = v;
      else h.emplace(k, v);
    }
    auto res = cli.Post(u.path, h, body, content_type);
    if (!res) throw TransportError("request to " + url + " failed: " + httplib::to_string(res.error()), true);
    if (res->status == 429 || res->status >= 500)
      throw TransportError("judge endpoint returned HTTP " + std::to_string(res->status), true, res->status);
    if (res->status < 200 || res->status >= 300)
      throw TransportError("judge endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body, false,
                           res->status);
    return res->body;
  }
};

}  // namespace agd::judge
