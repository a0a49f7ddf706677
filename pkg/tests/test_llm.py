import json
import socket

import httpx
import pytest

from prefilter_rerank.core import Judgment, JudgmentSet
from prefilter_rerank.llm import (
    BackendConfig,
    Gateway,
    GenerationRequest,
    LLMBackendError,
    LLMTransportError,
    generate,
    mock_oracle_score_text,
    oracle_permutation_text,
)
from prefilter_rerank.scoring import parse_scores

QRELS = JudgmentSet([Judgment("q", "a", 3), Judgment("q", "b", 1), Judgment("q", "c", 0)])


def req(text="hello", **ctx):
    return GenerationRequest("sys", text, context=ctx)


def http_cfg(**kw):
    kw.setdefault("retry_backoff_s", 0)
    return BackendConfig(kind="http_chat", model_name="m", endpoint_url="http://llm.test/v1/chat/completions", **kw)


def ok(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


class TestRequestKey:
    def test_context_does_not_affect_key(self):
        assert req(task="score").request_key == req(task="rank").request_key

    def test_every_field_affects_key(self):
        base = GenerationRequest("s", "u")
        variants = [GenerationRequest("s2", "u"), GenerationRequest("s", "u2"),
                    GenerationRequest("s", "u", max_tokens=5),
                    GenerationRequest("s", "u", temperature=0.5),
                    GenerationRequest("s", "u", attempt=1)]
        assert len({base.request_key, *(v.request_key for v in variants)}) == 6

    def test_validation(self):
        with pytest.raises(ValueError):
            GenerationRequest("s", "u", max_tokens=0)
        with pytest.raises(ValueError):
            BackendConfig(kind="nope")
        with pytest.raises(ValueError):
            BackendConfig(kind="http_chat")


class TestCache:
    def test_second_call_served_from_cache(self, tmp_path):
        calls = []
        cfg = BackendConfig(kind="mock_scripted", cache_dir=str(tmp_path))
        gw = Gateway(cfg, script=lambda r: calls.append(r) or "out")
        first = gw.generate(req())
        second = gw.generate(req())
        assert (first.text, first.from_cache) == ("out", False)
        assert (second.text, second.from_cache) == ("out", True)
        assert len(calls) == 1
        assert gw.stats.snapshot()["cache_hits"] == 1

    def test_cache_survives_new_gateway(self, tmp_path):
        cfg = BackendConfig(kind="mock_scripted", cache_dir=str(tmp_path))
        Gateway(cfg, script=["first"]).generate(req())
        again = Gateway(cfg, script=["never used"]).generate(req())
        assert again.text == "first" and again.from_cache

    def test_backend_identity_separates_entries(self, tmp_path):
        a = BackendConfig(kind="mock_scripted", model_name="a", cache_dir=str(tmp_path))
        b = BackendConfig(kind="mock_scripted", model_name="b", cache_dir=str(tmp_path))
        Gateway(a, script=["from a"]).generate(req())
        assert Gateway(b, script=["from b"]).generate(req()).text == "from b"

    def test_one_file_per_key(self, tmp_path):
        cfg = BackendConfig(kind="mock_scripted", cache_dir=str(tmp_path))
        gw = Gateway(cfg, script=lambda r: r.user_prompt.upper())
        for t in ["x", "y", "x"]:
            gw.generate(req(t))
        assert sorted(p.suffix for p in tmp_path.iterdir()) == [".txt", ".txt"]

    def test_no_cache_dir_means_no_caching(self):
        gw = Gateway(BackendConfig(kind="mock_scripted"), script=["1", "2"])
        assert [gw.generate(req()).text for _ in range(2)] == ["1", "2"]


class TestOracle:
    def test_scores_are_level_over_max(self):
        text = mock_oracle_score_text("q", ["a", "b", "c", "unjudged"], QRELS)
        report = parse_scores(text, ["a", "b", "c", "unjudged"])
        assert not report.unparsed_passage_ids
        assert {s.passage_id: s.value for s in report.parsed} == {"a": 1.0, "b": 1 / 3, "c": 0.0, "unjudged": 0.0}

    def test_noise_is_bounded_and_chunk_independent(self):
        one = mock_oracle_score_text("q", ["b"], QRELS, noise=0.1, seed=7)
        two = mock_oracle_score_text("q", ["a", "b"], QRELS, noise=0.1, seed=7)
        v1 = parse_scores(one, ["b"]).parsed[0].value
        v2 = parse_scores(two, ["a", "b"]).parsed[1].value
        assert v1 == v2
        assert abs(v1 - 1 / 3) <= 0.1

    def test_permutation(self):
        assert oracle_permutation_text("q", ["c", "b", "a", "x"], QRELS) == "[3] > [2] > [1] > [4]"

    def test_gateway_routes_by_task(self):
        gw = Gateway(BackendConfig(), judgments=QRELS)
        out = gw.generate(req(task="rank", query_id="q", passage_ids=["b", "a"]))
        assert out.text == "[2] > [1]"
        with pytest.raises(LLMBackendError):
            gw.generate(req(task="summarize", query_id="q", passage_ids=[]))

    def test_needs_judgments(self):
        with pytest.raises(ValueError):
            Gateway(BackendConfig(kind="mock_oracle"))


class TestScripted:
    def test_list_exhaustion(self):
        gw = Gateway(BackendConfig(kind="mock_scripted"), script=["only"])
        gw.generate(req())
        with pytest.raises(LLMBackendError, match="ran out"):
            gw.generate(req("other"))

    def test_module_level_generate(self):
        out = generate(req(), BackendConfig(kind="mock_scripted"), script=lambda r: "x")
        assert out.text == "x" and out.backend_id == "mock_scripted:mock"


class TestHttpChat:
    def test_request_body_and_bearer(self, monkeypatch):
        monkeypatch.setenv("LLM_API_KEY", "sekrit")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            seen["body"] = json.loads(request.content)
            return ok("Passage [1]: 0.5")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        gw = Gateway(http_cfg(), http_client=client)
        assert gw.generate(GenerationRequest("sys", "user", max_tokens=7)).text == "Passage [1]: 0.5"
        assert seen["auth"] == "Bearer sekrit"
        assert seen["body"] == {
            "model": "m", "max_tokens": 7, "temperature": 0.0,
            "messages": [{"role": "system", "content": "sys"},
                         {"role": "user", "content": "user"}],
        }

    def test_no_token_no_header(self, monkeypatch):
        monkeypatch.delenv("LLM_API_KEY", raising=False)
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return ok("x")

        Gateway(http_cfg(), http_client=httpx.Client(transport=httpx.MockTransport(handler))
                ).generate(req())
        assert seen["auth"] is None

    def test_retries_then_success(self):
        statuses = [503, 429]

        def handler(request):
            return httpx.Response(statuses.pop(0)) if statuses else ok("fine")

        gw = Gateway(http_cfg(max_retries=2),
                     http_client=httpx.Client(transport=httpx.MockTransport(handler)))
        assert gw.generate(req()).text == "fine"

    def test_transport_error_after_all_attempts(self):
        attempts = []

        def handler(request):
            attempts.append(1)
            raise httpx.ConnectError("refused", request=request)

        gw = Gateway(http_cfg(max_retries=2),
                     http_client=httpx.Client(transport=httpx.MockTransport(handler)))
        with pytest.raises(LLMTransportError) as exc:
            gw.generate(req())
        assert len(attempts) == 3 and exc.value.attempts == 3

    def test_unreachable_port(self):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            port = s.getsockname()[1]
        cfg = BackendConfig(kind="http_chat", model_name="m", timeout_s=2,
                            endpoint_url=f"http://127.0.0.1:{port}/v1/chat/completions",
                            max_retries=2, retry_backoff_s=0)
        with pytest.raises(LLMTransportError) as exc:
            Gateway(cfg).generate(req())
        assert exc.value.attempts == 3

    def test_client_error_not_retried(self):
        attempts = []

        def handler(request):
            attempts.append(1)
            return httpx.Response(400, text="bad request")

        gw = Gateway(http_cfg(max_retries=2),
                     http_client=httpx.Client(transport=httpx.MockTransport(handler)))
        with pytest.raises(LLMBackendError) as exc:
            gw.generate(req())
        assert exc.value.status == 400 and len(attempts) == 1

    def test_persistent_5xx_raises_backend_error(self):
        gw = Gateway(http_cfg(max_retries=1),
                     http_client=httpx.Client(transport=httpx.MockTransport(
                         lambda r: httpx.Response(500, text="boom"))))
        with pytest.raises(LLMBackendError, match="500"):
            gw.generate(req())

    def test_malformed_body(self):
        gw = Gateway(http_cfg(), http_client=httpx.Client(transport=httpx.MockTransport(
            lambda r: httpx.Response(200, json={"nope": 1}))))
        with pytest.raises(LLMBackendError):
            gw.generate(req())
