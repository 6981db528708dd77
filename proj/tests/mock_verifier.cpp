// Test double for the external verifier protocol.
//
//   mock_verifier echo               score = sample[0]
//   mock_verifier distance x,y,...   score = -|sample - target|^2
//   mock_verifier wrong-id           answers with id + 1
//   mock_verifier garbage            answers with a non-JSON line
//   mock_verifier die-after N        exits after N responses
//   mock_verifier hang               never answers requests
//   mock_verifier bad-version        handshake reports version 2
//   mock_verifier error              answers every request with an error object
#include <chrono>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "echo";
  std::vector<double> target;
  long die_after = -1;
  if (mode == "distance" && argc > 2) {
    std::stringstream ss(argv[2]);
    std::string tok;
    while (std::getline(ss, tok, ',')) target.push_back(std::stod(tok));
  }
  if (mode == "die-after" && argc > 2) die_after = std::stol(argv[2]);

  std::string line;
  long answered = 0;
  while (std::getline(std::cin, line)) {
    nlohmann::json msg;
    try {
      msg = nlohmann::json::parse(line);
    } catch (...) {
      std::cout << R"({"id":null,"error":"unparseable request"})" << std::endl;
      continue;
    }
    if (msg.contains("hello")) {
      const int version = mode == "bad-version" ? 2 : 1;
      std::cout << nlohmann::json{{"hello", {{"version", version}, {"name", "mock-" + mode}, {"parallel", false}}}}.dump()
                << std::endl;
      continue;
    }
    if (msg.contains("bye")) return 0;
    if (mode == "hang") {
      std::this_thread::sleep_for(std::chrono::seconds(30));
      continue;
    }
    const auto id = msg.value("id", nlohmann::json());
    if (!msg.contains("sample")) {
      std::cout << nlohmann::json{{"id", id}, {"error", "missing sample"}}.dump() << std::endl;
      continue;
    }
    const auto sample = msg["sample"].get<std::vector<double>>();
    nlohmann::json resp;
    if (mode == "garbage") {
      std::cout << "this is not json" << std::endl;
      continue;
    } else if (mode == "error") {
      resp = {{"id", id}, {"error", "scorer failed"}};
    } else if (mode == "wrong-id") {
      resp = {{"id", id.get<long>() + 1}, {"score", 0.0}};
    } else if (mode == "distance") {
      double s = 0.0;
      for (std::size_t i = 0; i < sample.size(); ++i) s += (sample[i] - target[i]) * (sample[i] - target[i]);
      resp = {{"id", id}, {"score", -s}};
    } else {
      resp = {{"id", id}, {"score", sample.empty() ? 0.0 : sample[0]}};
    }
    std::cout << resp.dump() << std::endl;
    if (++answered == die_after) return 0;
  }
  return 0;
}
