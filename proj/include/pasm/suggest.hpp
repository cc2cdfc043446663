#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace pasm {

struct SuggestRequest {
  std::vector<std::string> features;
  std::vector<std::pair<std::string, double>> best;  // (expression, loss)
  int ask = 1;
};

// Produces candidate expression strings for the evolutionary search. suggest
// returns the raw reply text; callers extract the expression line themselves
// so that malformed replies can be counted and discarded uniformly.
class SuggestionClient {
 public:
  virtual ~SuggestionClient() = default;
  virtual std::optional<std::string> suggest(const SuggestRequest& req) = 0;
  virtual bool offline() const = 0;
};

// Deterministic template-bank mock. The reply depends only on the request
// contents and the construction seed, so concurrent call order cannot change
// results.
class MockSuggestionClient : public SuggestionClient {
 public:
  explicit MockSuggestionClient(std::uint64_t seed) : seed_(seed) {}
  std::optional<std::string> suggest(const SuggestRequest& req) override;
  bool offline() const override { return true; }

 private:
  std::uint64_t seed_;
};

class HttpSuggestionClient : public SuggestionClient {
 public:
  HttpSuggestionClient(std::string host, int port, double timeout_seconds = 2.0);
  std::optional<std::string> suggest(const SuggestRequest& req) override;
  bool offline() const override { return false; }

 private:
  std::string host_;
  int port_;
  double timeout_seconds_;
};

// Pulls the expression out of a reply containing an "EXPR: <text>" line.
// Empty result when no such line exists.
std::string extract_expr_line(const std::string& reply);

// Parses "host:port" or "http://host:port"; empty optional for "offline".
std::optional<std::pair<std::string, int>> parse_endpoint(const std::string& endpoint);

// Serves the mock over HTTP on localhost:port until the process is killed.
// Returns only on bind failure.
int run_mock_llm_server(int port, std::uint64_t seed);

}  // namespace pasm
