#include "pasm/suggest.hpp"

#include <cstdio>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "pasm/rng.hpp"

namespace pasm {

std::string extract_expr_line(const std::string& reply) {
  std::istringstream in(reply);
  std::string line, found;
  int matches = 0;
  while (std::getline(in, line)) {
    std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos) continue;
    if (line.compare(start, 5, "EXPR:") == 0) {
      ++matches;
      found = line.substr(start + 5);
      std::size_t b = found.find_first_not_of(" \t\r");
      std::size_t e = found.find_last_not_of(" \t\r");
      found = b == std::string::npos ? "" : found.substr(b, e - b + 1);
    }
  }
  // The contract is exactly one expression line; anything else is discarded.
  return matches == 1 ? found : "";
}

std::optional<std::pair<std::string, int>> parse_endpoint(const std::string& endpoint) {
  if (endpoint.empty() || endpoint == "offline") return std::nullopt;
  std::string rest = endpoint;
  const std::string scheme = "http://";
  if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
  const std::size_t colon = rest.rfind(':');
  if (colon == std::string::npos) return std::pair<std::string, int>{rest, 80};
  const std::string host = rest.substr(0, colon);
  const int port = std::atoi(rest.c_str() + colon + 1);
  if (host.empty() || port <= 0) return std::nullopt;
  return std::pair<std::string, int>{host, port};
}

namespace {

std::uint64_t fnv1a(const std::string& s, std::uint64_t h) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_request(const SuggestRequest& req, std::uint64_t seed) {
  std::uint64_t h = mix_seed(seed) ^ 0xcbf29ce484222325ULL;
  for (const auto& f : req.features) h = fnv1a(f, h);
  for (const auto& [expr, loss] : req.best) {
    h = fnv1a(expr, h);
    h = fnv1a(std::to_string(loss), h);
  }
  return mix_seed(h + static_cast<std::uint64_t>(req.ask));
}

std::string render_template(int which, const std::string& a, const std::string& b, double c) {
  char buf[160];
  switch (which) {
    case 0: std::snprintf(buf, sizeof buf, "%s - %s", a.c_str(), b.c_str()); break;
    case 1: std::snprintf(buf, sizeof buf, "%s + %s", a.c_str(), b.c_str()); break;
    case 2: std::snprintf(buf, sizeof buf, "%s * %s", a.c_str(), b.c_str()); break;
    case 3: std::snprintf(buf, sizeof buf, "%s / %.3f - log(%s)", a.c_str(), c, b.c_str()); break;
    case 4: std::snprintf(buf, sizeof buf, "exp(%s) - %s", a.c_str(), b.c_str()); break;
    case 5: std::snprintf(buf, sizeof buf, "sqrt(%s) - %.3f", a.c_str(), c); break;
    case 6: std::snprintf(buf, sizeof buf, "%s - %.3f", a.c_str(), c); break;
    case 7: std::snprintf(buf, sizeof buf, "%s * %.3f + %s", a.c_str(), c, b.c_str()); break;
    case 8: std::snprintf(buf, sizeof buf, "log(%s) - log(%s)", a.c_str(), b.c_str()); break;
    default: std::snprintf(buf, sizeof buf, "%s / (%s + %.3f)", a.c_str(), b.c_str(), c); break;
  }
  return buf;
}

}  // namespace

std::optional<std::string> MockSuggestionClient::suggest(const SuggestRequest& req) {
  if (req.features.empty()) return std::nullopt;
  // Reply depends only on the request and the seed, never on call order.
  std::mt19937_64 rng(hash_request(req, seed_));
  std::uniform_int_distribution<int> pick_template(0, 9);
  std::uniform_int_distribution<std::size_t> pick_feature(0, req.features.size() - 1);
  std::uniform_real_distribution<double> pick_const(0.05, 2.0);
  std::uniform_int_distribution<int> malformed(0, 15);

  if (malformed(rng) == 0) {
    // Occasionally hand back an unparsable line to keep the discard path
    // honest in downstream counters.
    return "I would try a ratio here.\nEXPR: @@ not an expression @@\n";
  }
  const std::string a = req.features[pick_feature(rng)];
  const std::string b = req.features[pick_feature(rng)];
  const std::string body = render_template(pick_template(rng), a, b, pick_const(rng));
  return "Based on the current front, a compact refinement:\nEXPR: " + body + "\n";
}

HttpSuggestionClient::HttpSuggestionClient(std::string host, int port, double timeout_seconds)
    : host_(std::move(host)), port_(port), timeout_seconds_(timeout_seconds) {}

std::optional<std::string> HttpSuggestionClient::suggest(const SuggestRequest& req) {
  try {
    httplib::Client client(host_, port_);
    const auto seconds = static_cast<time_t>(timeout_seconds_);
    const auto micros =
        static_cast<time_t>((timeout_seconds_ - static_cast<double>(seconds)) * 1e6);
    client.set_connection_timeout(seconds, micros);
    client.set_read_timeout(seconds, micros);
    client.set_write_timeout(seconds, micros);

    nlohmann::json best = nlohmann::json::array();
    for (const auto& [expr, loss] : req.best) {
      best.push_back({{"expr", expr}, {"loss", loss}});
    }
    const nlohmann::json payload = {
        {"features", req.features}, {"best", best}, {"ask", req.ask}};
    auto res = client.Post("/suggest", payload.dump(), "application/json");
    if (!res || res->status != 200) return std::nullopt;
    const nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("text")) return std::nullopt;
    return reply.at("text").get<std::string>();
  } catch (...) {
    return std::nullopt;
  }
}

int run_mock_llm_server(int port, std::uint64_t seed) {
  httplib::Server server;
  auto mock = std::make_shared<MockSuggestionClient>(seed);
  server.Post("/suggest", [mock](const httplib::Request& req, httplib::Response& res) {
    const nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
    if (body.is_discarded()) {
      res.status = 400;
      return;
    }
    SuggestRequest sr;
    if (body.contains("features")) sr.features = body["features"].get<std::vector<std::string>>();
    if (body.contains("best")) {
      for (const auto& e : body["best"]) {
        sr.best.emplace_back(e.value("expr", ""), e.value("loss", 0.0));
      }
    }
    sr.ask = body.value("ask", 1);
    const auto text = mock->suggest(sr);
    res.set_content(nlohmann::json{{"text", text.value_or("")}}.dump(), "application/json");
  });
  std::fprintf(stderr, "mock suggestion server listening on 127.0.0.1:%d\n", port);
  if (!server.listen("127.0.0.1", port)) {
    std::fprintf(stderr, "failed to bind 127.0.0.1:%d\n", port);
    return 4;
  }
  return 0;
}

}  // namespace pasm
