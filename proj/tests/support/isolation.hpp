#pragma once

#include <algorithm>
#include <chrono>
#include <memory>
#include <thread>
#include <vector>

#include "rcpilot/telemetry.hpp"

namespace testdata {

struct IsolationResult {
  double median_ms_idle = 0;    // no clients attached
  double median_ms_loaded = 0;  // clients streaming
  std::vector<std::size_t> bytes_per_client;
  double paired_ratio = 1.0;  // median over rounds of loaded/idle block medians
  double ratio() const { return paired_ratio; }
};

/// Tick wall time of an unthrottled loop (simulated clock) with `clients`
/// streaming clients attached versus none. Idle and loaded blocks alternate,
/// in ABBA order, and are compared pairwise within a round, so drift of the
/// host between rounds cancels. Each block starts after a short settle so
/// connection setup and teardown are not timed.
inline IsolationResult measure_isolation(std::size_t clients = 8, int rounds = 20, int ticks_per_block = 250) {
  using namespace rcpilot;
  DriveConfig cfg;
  cfg.render_always = true;
  DriveLoop loop(default_scenario(), cfg);
  TelemetryOptions opts;
  opts.port = 0;
  TelemetryServer srv(loop, opts);
  srv.start();

  auto timed = [&](int n, std::vector<double>& out) {
    for (int i = 0; i < n; ++i) {
      const auto a = std::chrono::steady_clock::now();
      loop.tick();
      out.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - a).count());
    }
  };
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };

  IsolationResult res;
  res.bytes_per_client.assign(clients, 0);
  std::vector<double> idle, loaded, warmup;
  timed(200, warmup);
  auto settle = [] { std::this_thread::sleep_for(std::chrono::milliseconds(100)); };
  std::vector<double> block, idle_blocks, loaded_blocks;
  auto idle_block = [&] {
    settle();
    block.clear();
    timed(ticks_per_block, block);
    idle.insert(idle.end(), block.begin(), block.end());
    idle_blocks.push_back(median(block));
  };
  auto loaded_block = [&] {
    std::atomic<bool> done{false};
    std::vector<std::unique_ptr<httplib::Client>> cs;
    std::vector<std::thread> threads;
    for (std::size_t k = 0; k < clients; ++k) cs.push_back(std::make_unique<httplib::Client>("127.0.0.1", srv.port()));
    for (std::size_t k = 0; k < clients; ++k)
      threads.emplace_back([&, k] {
        cs[k]->Get(k % 2 ? "/api/video" : "/api/stream", [&](const char*, std::size_t n) {
          res.bytes_per_client[k] += n;
          return !done.load();
        });
      });
    while (srv.open_streams() < clients) std::this_thread::sleep_for(std::chrono::milliseconds(1));
    settle();
    block.clear();
    timed(ticks_per_block, block);
    loaded.insert(loaded.end(), block.begin(), block.end());
    loaded_blocks.push_back(median(block));
    done = true;
    for (auto& c : cs) c->stop();
    for (auto& t : threads) t.join();
    while (srv.open_streams() > 0) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  };
  for (int r = 0; r < rounds; ++r) {
    if (r % 2 == 0) {
      idle_block();
      loaded_block();
    } else {
      loaded_block();
      idle_block();
    }
  }
  res.median_ms_idle = median(idle);
  res.median_ms_loaded = median(loaded);
  std::vector<double> ratios;
  for (std::size_t i = 0; i < idle_blocks.size(); ++i) ratios.push_back(loaded_blocks[i] / idle_blocks[i]);
  res.paired_ratio = median(ratios);
  return res;
}

}  // namespace testdata
