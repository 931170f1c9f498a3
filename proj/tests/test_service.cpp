#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "corrosion/cli.hpp"
#include "corrosion/service.hpp"
#include "support.hpp"

using namespace corrosion;
using namespace corrosion::service;
using nlohmann::json;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

constexpr int kTile = 32;

// Probability of a tile is its top-left red value / 255.
ModelHandle fake_model(int tile = kTile) {
  ModelHandle h;
  h.tile_size = tile;
  h.info = {{"fake", true}};
  h.predict = [tile](const Image& img) {
    const auto grid = tile_image(img, TilingSpec::non_overlapping(tile));
    std::vector<double> probs;
    for (const auto& t : grid.tiles) probs.push_back(t.pixels.at(0, 0, 0) / 255.0);
    return aggregate::TilePredictions::from_probs(grid.image_id, grid.rows, grid.cols, probs);
  };
  return h;
}

// rows x cols tiles, the first `corroded` of them (row-major) marked corroded.
std::vector<std::uint8_t> grid_png(int rows, int cols, int corroded, std::uint8_t shade = 60) {
  Image img(cols * kTile, rows * kTile, "g");
  for (int r = 0; r < img.height(); ++r)
    for (int c = 0; c < img.width(); ++c) {
      const int k = (r / kTile) * cols + c / kTile;
      auto* px = &img.pixels()[(static_cast<std::size_t>(r) * img.width() + c) * 3];
      px[0] = k < corroded ? 255 : 0;
      px[1] = static_cast<std::uint8_t>(shade + (r + c) % 7);
      px[2] = shade;
    }
  return encode_png(img);
}

json body_of(const Reply& r) { return json::parse(r.body); }

ServiceOptions options(const TempDir& dir, int c = 0) {
  ServiceOptions o;
  o.store_dir = dir / "store";
  o.default_c = c;
  return o;
}

void expect_consistent(const json& listing) {
  const int c = listing.at("c");
  for (const auto& im : listing.at("images")) {
    EXPECT_EQ(im.at("c"), c);
    EXPECT_EQ(im.at("verdict"), im.at("corroded_count").get<int>() > c ? 1 : 0) << im.at("image_id");
  }
}

// Real HTTP server on an ephemeral port around a Service.
class Http {
 public:
  explicit Http(Service& svc) {
    mount(server_, svc);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~Http() {
    server_.stop();
    thread_.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(60, 0);
    return c;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

std::string as_string(const std::vector<std::uint8_t>& v) { return std::string(v.begin(), v.end()); }

}  // namespace

TEST(ServiceUpload, FullSizeImageOverHttp) {
  TempDir dir("svc");
  Service svc(fake_model(256), options(dir));
  Http http(svc);
  auto cli = http.client();
  const auto png = encode_png(testsupport::solid_image(4928, 3264, 200, 40, 40, "big"));
  const auto res = cli.Post("/api/images?id=big", as_string(png), "image/png");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j.at("n_tiles"), 228);
  EXPECT_EQ(j.at("rows"), 12);
  EXPECT_EQ(j.at("cols"), 19);
  EXPECT_EQ(j.at("corroded_count"), 228);
  EXPECT_EQ(j.at("areal_percent"), 100.0);
}

TEST(ServiceUpload, RejectedUploads) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir));
  Http http(svc);
  auto cli = http.client();
  auto small = cli.Post("/api/images", as_string(encode_png(testsupport::solid_image(31, 100, 1, 2, 3))), "image/png");
  EXPECT_EQ(small->status, 422);
  EXPECT_EQ(json::parse(small->body).at("code"), "image_too_small");
  auto junk = cli.Post("/api/images", "definitely not an image", "application/octet-stream");
  EXPECT_EQ(junk->status, 400);
  EXPECT_TRUE(json::parse(junk->body).contains("message"));
  const auto png = as_string(grid_png(2, 2, 1));
  EXPECT_EQ(cli.Post("/api/images?id=a", png, "image/png")->status, 201);
  EXPECT_EQ(cli.Post("/api/images?id=a", png, "image/png")->status, 409);
  EXPECT_EQ(cli.Post("/api/images?id=..%2Fx", png, "image/png")->status, 400);
  // multipart upload
  httplib::MultipartFormDataItems items = {{"image", png, "b.png", "image/png"}};
  const auto mp = cli.Post("/api/images?id=b", items);
  EXPECT_EQ(mp->status, 201);
  EXPECT_EQ(json::parse(mp->body).at("corroded_count"), 1);
}

TEST(ServiceUpload, PartialTilesAreDropped) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir));
  // 100x100 holds 3x3 whole tiles
  const auto r = svc.post_image(encode_png(testsupport::solid_image(100, 100, 255, 0, 0)), "p");
  ASSERT_EQ(r.status, 201);
  EXPECT_EQ(body_of(r).at("n_tiles"), 9);
}

TEST(ServiceUpload, NoModelMeans503) {
  TempDir dir("svc");
  Service svc(std::nullopt, options(dir));
  Http http(svc);
  auto cli = http.client();
  EXPECT_EQ(cli.Post("/api/images", as_string(grid_png(1, 1, 0)), "image/png")->status, 503);
  const auto m = json::parse(cli.Get("/api/model")->body);
  EXPECT_EQ(m.at("loaded"), false);
  EXPECT_EQ(cli.Get("/api/images/none")->status, 404);
  EXPECT_EQ(json::parse(cli.Get("/api/images/none")->body).at("code"), "not_found");
}

TEST(ServiceThreshold, WhatIfFlipsExactlyTheCountsInTheWindow) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 10));
  Http http(svc);
  auto cli = http.client();
  std::map<std::string, int> counts;
  for (int k = 0; k <= 25; ++k) {
    const std::string id = "im" + std::to_string(k);
    ASSERT_EQ(cli.Post(("/api/images?id=" + id).c_str(), as_string(grid_png(5, 5, k)), "image/png")->status, 201);
    counts[id] = k;
  }
  const auto store_before = dataset::read_text(dir / "store" / "records.jsonl");
  const auto list_before = cli.Get("/api/images")->body;

  auto what_if = [&](int c, bool commit) {
    const auto res = cli.Post("/api/threshold", json{{"c", c}, {"commit", commit}}.dump(), "application/json");
    EXPECT_EQ(res->status, 200);
    return json::parse(res->body);
  };
  auto flipped = [](const json& j) {
    std::set<std::string> s;
    for (const auto& f : j.at("flips")) s.insert(f.at("image_id").get<std::string>());
    return s;
  };
  auto window = [&](int lo, int hi) {
    std::set<std::string> s;
    for (const auto& [id, n] : counts)
      if (n > lo && n <= hi) s.insert(id);
    return s;
  };

  EXPECT_TRUE(what_if(10, false).at("flips").empty());
  EXPECT_EQ(flipped(what_if(15, false)), window(10, 15));
  EXPECT_EQ(flipped(what_if(7, false)), window(7, 10));
  const auto all_off = what_if(25, false);
  EXPECT_EQ(flipped(all_off), window(10, 25));
  for (const auto& f : all_off.at("flips")) EXPECT_EQ(f.at("to"), 0);
  // nothing persisted by what-ifs
  EXPECT_EQ(dataset::read_text(dir / "store" / "records.jsonl"), store_before);
  EXPECT_EQ(cli.Get("/api/images")->body, list_before);
  EXPECT_EQ(svc.threshold(), 10);

  // committing 13, then asking about 10 flips (10, 13]
  EXPECT_EQ(flipped(what_if(13, true)), window(10, 13));
  EXPECT_EQ(svc.threshold(), 13);
  expect_consistent(json::parse(cli.Get("/api/images")->body));
  EXPECT_EQ(flipped(what_if(10, false)), window(10, 13));

  EXPECT_EQ(cli.Post("/api/threshold", R"({"c": -1})", "application/json")->status, 400);
  EXPECT_EQ(cli.Post("/api/threshold", R"({"c": "x"})", "application/json")->status, 400);
  EXPECT_EQ(cli.Post("/api/threshold", "{", "application/json")->status, 400);
}

TEST(ServiceOverride, SoleCorrodedTileFlipsImage) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 0));
  Http http(svc);
  auto cli = http.client();
  ASSERT_EQ(cli.Post("/api/images?id=one", as_string(grid_png(3, 4, 1)), "image/png")->status, 201);
  EXPECT_EQ(json::parse(cli.Get("/api/images/one")->body).at("verdict"), 1);
  const auto res = cli.Patch("/api/images/one/tiles/0/0", R"({"label": 0})", "application/json");
  ASSERT_EQ(res->status, 200);
  const auto j = json::parse(res->body);
  EXPECT_EQ(j.at("verdict"), 0);
  EXPECT_EQ(j.at("corroded_count"), 0);
  EXPECT_EQ(j.at("model_verdicts")[0][0], 1);
  EXPECT_EQ(j.at("tile_verdicts")[0][0], 0);

  // same label again: no new override, no audit entry
  const auto audit_before = dataset::read_text(dir / "store" / "audit.jsonl");
  EXPECT_EQ(cli.Patch("/api/images/one/tiles/0/0", R"({"label": 0})", "application/json")->status, 200);
  EXPECT_EQ(cli.Patch("/api/images/one/tiles/2/3", R"({"label": 0})", "application/json")->status, 200);
  EXPECT_EQ(dataset::read_text(dir / "store" / "audit.jsonl"), audit_before);

  EXPECT_EQ(cli.Patch("/api/images/one/tiles/3/0", R"({"label": 1})", "application/json")->status, 404);
  EXPECT_EQ(cli.Patch("/api/images/one/tiles/0/4", R"({"label": 1})", "application/json")->status, 404);
  EXPECT_EQ(cli.Patch("/api/images/nope/tiles/0/0", R"({"label": 1})", "application/json")->status, 404);
  EXPECT_EQ(cli.Patch("/api/images/one/tiles/0/0", R"({"label": 2})", "application/json")->status, 400);
}

TEST(ServiceOverride, CountMatchesRecountAfterManyOverrides) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 4));
  ASSERT_EQ(svc.post_image(grid_png(4, 5, 9), "m").status, 201);
  std::mt19937_64 gen(6);
  std::vector<int> expected(20, 0);
  for (int k = 0; k < 9; ++k) expected[k] = 1;
  for (int i = 0; i < 60; ++i) {
    const int row = static_cast<int>(gen() % 4), col = static_cast<int>(gen() % 5), label = static_cast<int>(gen() % 2);
    expected[row * 5 + col] = label;
    const auto r = svc.override_tile("m", row, col, {{"label", label}});
    ASSERT_EQ(r.status, 200);
    const auto j = body_of(r);
    int count = 0;
    for (const auto& row_v : j.at("tile_verdicts"))
      for (const auto& v : row_v) count += v.get<int>();
    EXPECT_EQ(j.at("corroded_count"), count);
    EXPECT_EQ(j.at("verdict"), count > 4 ? 1 : 0);
    EXPECT_DOUBLE_EQ(j.at("areal_percent").get<double>(), 100.0 * count / 20);
  }
  const auto j = body_of(svc.get_image("m"));
  std::vector<int> got;
  for (const auto& row_v : j.at("tile_verdicts"))
    for (const auto& v : row_v) got.push_back(v);
  EXPECT_EQ(got, expected);
}

TEST(ServiceMetrics, ReviewedFixtureReproducesWholeImageCounts) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 0));
  Http http(svc);
  auto cli = http.client();
  EXPECT_EQ(cli.Get("/api/metrics")->status, 409);
  // 16 intact called intact, 16 corroded called corroded, 1 corroded missed
  int k = 0;
  auto add = [&](int corroded_tiles, int label) {
    const std::string id = "r" + std::to_string(k++);
    ASSERT_EQ(svc.post_image(grid_png(2, 2, corroded_tiles, static_cast<std::uint8_t>(k)), id).status, 201);
    const auto res = cli.Post(("/api/images/" + id + "/review").c_str(),
                              json{{"status", "confirmed"}, {"label", label}}.dump(), "application/json");
    ASSERT_EQ(res->status, 200);
  };
  for (int i = 0; i < 16; ++i) add(0, 0);
  for (int i = 0; i < 16; ++i) add(1 + i % 4, 1);
  add(0, 1);
  const auto res = cli.Get("/api/metrics");
  ASSERT_EQ(res->status, 200);
  const auto m = json::parse(res->body);
  EXPECT_EQ(m.at("tn"), 16);
  EXPECT_EQ(m.at("fp"), 0);
  EXPECT_EQ(m.at("fn"), 1);
  EXPECT_EQ(m.at("tp"), 16);
  EXPECT_NEAR(m.at("f1").get<double>(), 0.9697, 5e-5);
  EXPECT_NEAR(m.at("tpr").get<double>(), 0.9412, 5e-5);
  EXPECT_EQ(m.at("n_labeled"), 33);
  EXPECT_GT(m.at("roc").at("auc").get<double>(), 0.9);
}

TEST(ServiceMetrics, SingleClassGives409WithRates) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 0));
  for (int i = 0; i < 3; ++i) {
    const std::string id = "s" + std::to_string(i);
    ASSERT_EQ(svc.post_image(grid_png(2, 2, 1 + i, static_cast<std::uint8_t>(i)), id).status, 201);
    ASSERT_EQ(svc.review(id, {{"status", "confirmed"}}).status, 200);
  }
  const auto r = svc.metrics();
  EXPECT_EQ(r.status, 409);
  const auto j = body_of(r);
  EXPECT_EQ(j.at("tp"), 3);
  EXPECT_EQ(j.at("f1"), 1.0);
  EXPECT_FALSE(j.contains("roc"));
}

TEST(ServiceMetrics, ReviewSemantics) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 0));
  ASSERT_EQ(svc.post_image(grid_png(2, 2, 2), "a").status, 201);
  EXPECT_EQ(body_of(svc.review("a", {{"status", "disputed"}})).at("label"), 0);
  EXPECT_EQ(body_of(svc.review("a", {{"status", "confirmed"}})).at("label"), 1);
  EXPECT_TRUE(body_of(svc.review("a", {{"status", "unreviewed"}})).at("label").is_null());
  EXPECT_EQ(svc.review("a", {{"status", "maybe"}}).status, 400);
  EXPECT_EQ(svc.review("zz", {{"status", "confirmed"}}).status, 404);
  EXPECT_EQ(svc.metrics().status, 409);
}

TEST(ServiceHeatmap, BytesMatchTheCliRenderer) {
  TempDir dir("svc");
  Service svc(fake_model(), options(dir, 2));
  Http http(svc);
  auto cli = http.client();
  const auto png = grid_png(3, 5, 6);
  ASSERT_EQ(cli.Post("/api/images?id=h", as_string(png), "image/png")->status, 201);
  ASSERT_EQ(cli.Patch("/api/images/h/tiles/2/4", R"({"label": 1})", "application/json")->status, 200);
  const auto served = cli.Get("/api/images/h/heatmap.png?alpha=0.6");
  ASSERT_EQ(served->status, 200);
  EXPECT_EQ(served->get_header_value("Content-Type"), "image/png");

  // the CLI path: same image file and an image report of the record
  write_file_bytes(dir / "h.png", png);
  const auto rec = json::parse(cli.Get("/api/images/h")->body);
  std::vector<int> v;
  for (const auto& row : rec.at("tile_verdicts"))
    for (const auto& x : row) v.push_back(x);
  aggregate::TilePredictions p;
  p.image_id = "h";
  p.rows = rec.at("rows");
  p.cols = rec.at("cols");
  p.verdicts = v;
  const auto ip = aggregate::classify_image(p, {rec.at("c").get<int>()});
  dataset::write_text(dir / "h.json", report::image_report(p, ip, rec.at("tile_size")).dump());
  std::ostringstream out, err;
  ASSERT_EQ(cli::run({"heatmap", "--image", (dir / "h.png").string(), "--report", (dir / "h.json").string(), "--alpha",
                      "0.6", "--out", (dir / "cli").string()},
                     out, err),
            0)
      << err.str();
  EXPECT_EQ(as_string(read_file_bytes(dir / "cli" / "heatmaps" / "h.png")), served->body);

  const auto default_alpha = cli.Get("/api/images/h/heatmap.png");
  EXPECT_NE(default_alpha->body, served->body);
  EXPECT_EQ(cli.Get("/api/images/h/heatmap.png?alpha=2")->status, 400);
  EXPECT_EQ(cli.Get("/api/images/h/heatmap.png?alpha=abc")->status, 400);
  EXPECT_EQ(cli.Get("/api/images/q/heatmap.png")->status, 404);
}

TEST(ServiceStore, ReplayRestoresState) {
  TempDir dir("svc");
  std::string listing, record;
  {
    Service svc(fake_model(), options(dir, 1));
    for (int k = 0; k < 4; ++k) ASSERT_EQ(svc.post_image(grid_png(2, 3, k), "p" + std::to_string(k)).status, 201);
    svc.override_tile("p2", 0, 0, {{"label", 0}});
    svc.review("p3", {{"status", "disputed"}});
    svc.threshold({{"c", 2}, {"commit", true}});
    listing = body_of(svc.list_images()).dump();
    record = svc.get_image("p2").body;
  }
  json l = json::parse(listing);
  expect_consistent(l);
  Service again(fake_model(), options(dir, 0));
  EXPECT_EQ(again.threshold(), 2);
  EXPECT_EQ(body_of(again.list_images()).dump(), listing);
  EXPECT_EQ(again.get_image("p2").body, record);
  Service no_model(std::nullopt, options(dir, 0));
  EXPECT_EQ(body_of(no_model.get_image("p3")).at("review_status"), "disputed");
}

TEST(ServiceStore, CorruptStoreIsRejected) {
  TempDir dir("svc");
  fs::create_directories(dir / "store");
  dataset::write_text(dir / "store" / "records.jsonl", "{not json\n");
  EXPECT_THROW(Service(fake_model(), options(dir)), Error);
}

TEST(ServiceConcurrency, ReadersNeverSeeMixedThresholds) {
  TempDir dir("svc");
  ServiceOptions o = options(dir, 0);
  o.inference_workers = 3;
  Service svc(fake_model(), o);
  Http http(svc);
  std::atomic<bool> done{false};
  std::atomic<int> bad{0}, listings{0};
  std::vector<std::thread> threads;
  for (int w = 0; w < 4; ++w)
    threads.emplace_back([&, w] {
      auto cli = http.client();
      for (int k = 0; k < 6; ++k) {
        const std::string id = "w" + std::to_string(w) + "_" + std::to_string(k);
        const auto res = cli.Post(("/api/images?id=" + id).c_str(), as_string(grid_png(4, 4, (w * 6 + k) % 17)),
                                  "image/png");
        if (!res || res->status != 201) ++bad;
      }
    });
  threads.emplace_back([&] {
    auto cli = http.client();
    for (int c = 0; c < 30; ++c)
      cli.Post("/api/threshold", json{{"c", c % 9}, {"commit", true}}.dump(), "application/json");
  });
  threads.emplace_back([&] {
    auto cli = http.client();
    while (!done) {
      const auto res = cli.Get("/api/images");
      if (!res) continue;
      const auto j = json::parse(res->body);
      const int c = j.at("c");
      for (const auto& im : j.at("images"))
        if (im.at("c") != c || im.at("verdict") != (im.at("corroded_count").get<int>() > c ? 1 : 0)) ++bad;
      ++listings;
    }
  });
  for (std::size_t i = 0; i + 1 < threads.size(); ++i) threads[i].join();
  done = true;
  threads.back().join();
  EXPECT_EQ(bad, 0);
  EXPECT_GT(listings, 0);
  const auto j = body_of(svc.list_images());
  EXPECT_EQ(j.at("images").size(), 24u);
  expect_consistent(j);
}

TEST(ServiceModel, InfoFromRealCheckpoint) {
  auto params = model::init_model<float>(testsupport::mini_arch(32, 4, {4, 8}), 1);
  const auto h = ModelHandle::from(Predictor(params));
  EXPECT_EQ(h.tile_size, 32);
  TempDir dir("svc");
  Service svc(h, options(dir, 3));
  const auto j = body_of(svc.model_info());
  EXPECT_EQ(j.at("loaded"), true);
  EXPECT_EQ(j.at("c"), 3);
  EXPECT_EQ(j.at("trainable_params"), params.trainable_count());
  const auto r = svc.post_image(grid_png(2, 2, 1), "real");
  ASSERT_EQ(r.status, 201);
  const auto rec = body_of(svc.get_image("real"));
  for (const auto& row : rec.at("tile_probs"))
    for (const auto& p : row) {
      EXPECT_GE(p.get<double>(), 0.0);
      EXPECT_LE(p.get<double>(), 1.0);
    }
}
