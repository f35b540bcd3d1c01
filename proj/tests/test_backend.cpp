#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <thread>

#include "mats/backend.hpp"
#include "mats/http_backend_impl.hpp"
#include "support/helpers.hpp"

using namespace mats;
using testsupport::TempDir;

namespace {

GenerationRequest request_of(std::string prompt, int n = 1, double temperature = 0.0) {
    GenerationRequest r;
    r.prompt = std::move(prompt);
    r.n = n;
    r.temperature = temperature;
    return r;
}

/// In-process HTTP server for client tests. Binds an ephemeral port on
/// loopback and serves one handler until destroyed.
struct LocalServer {
    httplib::Server server;
    int port = 0;
    std::thread thread;

    template <typename Handler>
    explicit LocalServer(Handler handler) {
        server.Post("/v1/completions", handler);
        port = server.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LocalServer() {
        server.stop();
        thread.join();
    }
    std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }
};

}  // namespace

TEST_CASE("generation request validation") {
    CHECK_NOTHROW(request_of("p").validate());
    CHECK_NOTHROW(request_of("p", 4, 1.0).validate());
    CHECK_THROWS_AS(request_of("p", 0).validate(), ValidationError);
    CHECK_THROWS_AS(request_of("p", 1, -0.5).validate(), ValidationError);
    CHECK_THROWS_AS(request_of("p", 2, 0.0).validate(), ValidationError);
}

TEST_CASE("fixture keys bucket temperature and separate prompts") {
    CHECK(fixture_key(request_of("hello")) == digest_hex("hello") + "|n=1|t=greedy");
    CHECK(fixture_key(request_of("hello", 9, 1.0)) == digest_hex("hello") + "|n=9|t=1.00");

    SECTION("nearby float temperatures share a bucket") {
        CHECK(fixture_key(request_of("p", 3, 0.7)) == fixture_key(request_of("p", 3, 0.70000004)));
        CHECK(fixture_key(request_of("p", 3, 0.7)) != fixture_key(request_of("p", 3, 0.8)));
    }

    SECTION("different prompts and ns never collide") {
        CHECK(fixture_key(request_of("a")) != fixture_key(request_of("b")));
        CHECK(fixture_key(request_of("a", 2, 1.0)) != fixture_key(request_of("a", 3, 1.0)));
    }
}

TEST_CASE("scripted backend replays queued responses in order") {
    ScriptedFixture fixture;
    fixture.enqueue(request_of("plan this"), {"first"});
    fixture.enqueue(request_of("plan this"), {"second"});
    fixture.enqueue(request_of("plan this", 3, 1.0), {"a", "b", "c"});
    ScriptedBackend backend(fixture);

    SECTION("FIFO per key, spy records calls") {
        CHECK(backend.remaining() == 3);
        auto r1 = backend.complete(request_of("plan this"));
        auto r2 = backend.complete(request_of("plan this"));
        CHECK(r1.completions == std::vector<std::string>{"first"});
        CHECK(r2.completions == std::vector<std::string>{"second"});
        auto sampled = backend.complete(request_of("plan this", 3, 1.0));
        CHECK(sampled.completions == std::vector<std::string>{"a", "b", "c"});
        CHECK(backend.remaining() == 0);

        auto calls = backend.calls();
        REQUIRE(calls.size() == 3);
        CHECK(calls[0].prompt == "plan this");
        CHECK(calls[0].n == 1);
        CHECK(calls[2].n == 3);
        CHECK(calls[2].temperature == Catch::Approx(1.0));
    }

    SECTION("exhausted key raises a fixture miss naming the digest") {
        backend.complete(request_of("plan this"));
        backend.complete(request_of("plan this"));
        CHECK_THROWS_AS(backend.complete(request_of("plan this")), FixtureMissError);
        try {
            backend.complete(request_of("plan this"));
            FAIL("expected FixtureMissError");
        } catch (const FixtureMissError& e) {
            CHECK(std::string(e.what()).find(digest_hex("plan this")) != std::string::npos);
        }
    }

    SECTION("unknown prompt is a fixture miss, invalid request is not consumed") {
        CHECK_THROWS_AS(backend.complete(request_of("never scripted")), FixtureMissError);
        CHECK_THROWS_AS(backend.complete(request_of("plan this", 0)), ValidationError);
        CHECK(backend.remaining() == 3);
    }

    SECTION("completion-count mismatch is a fixture miss") {
        ScriptedFixture bad;
        bad.enqueue(request_of("p", 2, 1.0), {"only one"});
        ScriptedBackend b(bad);
        CHECK_THROWS_AS(b.complete(request_of("p", 2, 1.0)), FixtureMissError);
    }
}

TEST_CASE("fixtures save and load") {
    TempDir dir;
    std::string path = (dir.path() / "fixture.json").string();
    std::string manifest = (dir.path() / "manifest.json").string();

    SECTION("round-trip preserves queues and order") {
        ScriptedFixture fixture;
        fixture.enqueue(request_of("alpha"), {"one"});
        fixture.enqueue(request_of("alpha"), {"two"});
        fixture.enqueue(request_of("beta", 2, 0.5), {"x", "y"});
        fixture.save(path, manifest);

        ScriptedBackend backend(ScriptedFixture::load(path));
        CHECK(backend.complete(request_of("alpha")).completions ==
              std::vector<std::string>{"one"});
        CHECK(backend.complete(request_of("alpha")).completions ==
              std::vector<std::string>{"two"});
        CHECK(backend.complete(request_of("beta", 2, 0.5)).completions ==
              std::vector<std::string>{"x", "y"});

        std::string man = testsupport::read_file(manifest);
        CHECK(man.find("alpha") != std::string::npos);
        CHECK(man.find(digest_hex("alpha")) != std::string::npos);
    }

    SECTION("a bare string entry means one completion") {
        std::string key = fixture_key(request_of("q"));
        testsupport::write_file(path, "{\"" + key + "\": [\"plain\", [\"listed\"]]}");
        ScriptedBackend backend(ScriptedFixture::load(path));
        CHECK(backend.complete(request_of("q")).completions == std::vector<std::string>{"plain"});
        CHECK(backend.complete(request_of("q")).completions == std::vector<std::string>{"listed"});
    }

    SECTION("load rejects malformed files") {
        CHECK_THROWS_AS(ScriptedFixture::load((dir.path() / "ghost.json").string()), SetupError);
        testsupport::write_file(path, "[1, 2]");
        CHECK_THROWS_AS(ScriptedFixture::load(path), ValidationError);
        testsupport::write_file(path, "{\"k\": 7}");
        CHECK_THROWS_AS(ScriptedFixture::load(path), ValidationError);
        testsupport::write_file(path, "{\"k\": [7]}");
        CHECK_THROWS_AS(ScriptedFixture::load(path), ValidationError);
        testsupport::write_file(path, "not json");
        CHECK_THROWS_AS(ScriptedFixture::load(path), ValidationError);
    }
}

TEST_CASE("completion replies parse into results") {
    SECTION("texts in choice order") {
        auto r = detail::parse_completion_reply(
            "{\"choices\": [{\"text\": \"a\"}, {\"text\": \"b\"}]}", 2);
        CHECK(r.completions == std::vector<std::string>{"a", "b"});
        CHECK(r.token_logprobs.empty());
    }

    SECTION("token logprobs skip the leading null") {
        auto r = detail::parse_completion_reply(
            "{\"choices\": [{\"text\": \"ab\", \"logprobs\": {"
            "\"tokens\": [\"a\", \"b\"], \"token_logprobs\": [null, -0.5]}}]}",
            1);
        REQUIRE(r.token_logprobs.size() == 1);
        REQUIRE(r.token_logprobs[0].size() == 1);
        CHECK(r.token_logprobs[0][0].token == "b");
        CHECK(r.token_logprobs[0][0].logprob == Catch::Approx(-0.5));
    }

    SECTION("malformed bodies raise backend errors") {
        CHECK_THROWS_AS(detail::parse_completion_reply("not json", 1), BackendError);
        CHECK_THROWS_AS(detail::parse_completion_reply("{}", 1), BackendError);
        CHECK_THROWS_AS(detail::parse_completion_reply("{\"choices\": [{}]}", 1), BackendError);
        CHECK_THROWS_AS(
            detail::parse_completion_reply("{\"choices\": [{\"text\": \"a\"}]}", 2),
            BackendError);
    }
}

TEST_CASE("http backend round-trips against a local server") {
    std::atomic<int> hits{0};
    std::string seen_body;
    std::string seen_auth;
    LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        seen_body = req.body;
        auto it = req.headers.find("Authorization");
        seen_auth = it == req.headers.end() ? "" : it->second;
        res.set_content("{\"choices\": [{\"text\": \"SELECT 1\"}]}", "application/json");
    });

    HttpBackendConfig config;
    config.base_url = server.url();
    config.model = "demo-model";
    config.auth_token = "sekrit";
    config.backoff_base_ms = 10;
    HttpBackend backend(config);

    auto result = backend.complete(request_of("write sql", 1, 0.0));
    CHECK(result.completions == std::vector<std::string>{"SELECT 1"});
    CHECK(hits == 1);
    CHECK(seen_auth == "Bearer sekrit");

    auto body = nlohmann::json::parse(seen_body);
    CHECK(body["model"] == "demo-model");
    CHECK(body["prompt"] == "write sql");
    CHECK(body["n"] == 1);
    CHECK(body["temperature"] == 0.0);
    CHECK(body.contains("max_tokens"));
}

TEST_CASE("http backend retry policy") {
    SECTION("4xx rejections are not retried") {
        std::atomic<int> hits{0};
        LocalServer server([&](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.status = 400;
            res.set_content("bad request", "text/plain");
        });
        HttpBackendConfig config;
        config.base_url = server.url();
        config.backoff_base_ms = 10;
        HttpBackend backend(config);
        CHECK_THROWS_AS(backend.complete(request_of("p")), BackendError);
        CHECK(hits == 1);
    }

    SECTION("5xx replies retry until success") {
        std::atomic<int> hits{0};
        LocalServer server([&](const httplib::Request&, httplib::Response& res) {
            if (++hits == 1) {
                res.status = 503;
                res.set_content("warming up", "text/plain");
            } else {
                res.set_content("{\"choices\": [{\"text\": \"ok\"}]}", "application/json");
            }
        });
        HttpBackendConfig config;
        config.base_url = server.url();
        config.backoff_base_ms = 10;
        HttpBackend backend(config);
        CHECK(backend.complete(request_of("p")).completions == std::vector<std::string>{"ok"});
        CHECK(hits == 2);
    }

    SECTION("connection failures exhaust attempts then raise a transport error") {
        HttpBackendConfig config;
        config.base_url = "http://127.0.0.1:1";
        config.max_attempts = 2;
        config.backoff_base_ms = 10;
        config.timeout_s = 2;
        HttpBackend backend(config);
        try {
            backend.complete(request_of("p"));
            FAIL("expected TransportError");
        } catch (const TransportError& e) {
            CHECK(std::string(e.what()).find("2 attempts") != std::string::npos);
        }
    }

    SECTION("configuration is sanity-checked") {
        CHECK_THROWS_AS(HttpBackend(HttpBackendConfig{}), SetupError);
    }
}
