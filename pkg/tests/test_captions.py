import json

import httpx
import numpy as np
import pytest

from vlmir.captions import (
    CaptionCache,
    CaptionRecord,
    MalformedResponseError,
    MissingMetadataError,
    ProviderUnavailableError,
    caption_get,
    caption_put,
    mock_caption,
    remote_caption,
    scene_caption,
)

SCENE = {"objects": [{"color": "red", "shape": "circle"}, {"color": "blue", "shape": "square"}], "background": "striped wall"}
IMG = np.zeros((8, 8, 3), np.float32)


def test_gt_caption_is_clean_template():
    assert scene_caption(SCENE) == "a photo of a red circle and a blue square on a striped wall"
    assert mock_caption("x", SCENE, "gt") == scene_caption(SCENE)


def test_lq_caption_deterministic_and_zero_rate_is_clean():
    assert mock_caption("x", SCENE, "lq", seed=1) == mock_caption("x", SCENE, "lq", seed=1)
    assert mock_caption("x", SCENE, "lq", corruption=0.0) == scene_caption(SCENE)
    corrupted = {mock_caption(f"id{k}", SCENE, "lq", corruption=1.0) for k in range(5)}
    assert scene_caption(SCENE) not in corrupted


def test_mock_caption_requires_metadata():
    with pytest.raises(MissingMetadataError):
        mock_caption("x", None, "gt")
    with pytest.raises(MissingMetadataError):
        mock_caption("x", {"objects": []}, "gt")


def _client(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_remote_happy_path_posts_base64_png():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"caption": "a dog"})

    assert remote_caption(IMG, "http://captioner", client=_client(handler)) == "a dog"
    assert seen["url"] == "http://captioner/caption"
    assert isinstance(seen["body"]["image"], str) and seen["body"]["image"].startswith("iVBOR")


def test_remote_empty_caption_is_malformed():
    client = _client(lambda r: httpx.Response(200, json={"caption": ""}))
    with pytest.raises(MalformedResponseError):
        remote_caption(IMG, "http://c", client=client, backoff=0)


def test_remote_retries_then_succeeds():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"caption": "ok"})

    assert remote_caption(IMG, "http://c", retries=3, backoff=0, client=_client(handler)) == "ok"
    assert len(calls) == 3


def test_remote_exhaustion_raises_unavailable():
    def handler(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(ProviderUnavailableError):
        remote_caption(IMG, "http://c", retries=2, backoff=0, client=_client(handler))


def test_cache_round_trip_and_last_write_wins(tmp_path):
    path = tmp_path / "cache.jsonl"
    rec = CaptionRecord("img1", "gt", "first", "mock")
    caption_put(path, rec)
    assert caption_get(path, "img1", "gt") == rec
    caption_put(path, CaptionRecord("img1", "gt", "second", "mock"))
    assert caption_get(path, "img1", "gt").text == "second"
    assert caption_get(path, "img1", "lq") is None


def test_cache_skips_corrupt_lines(tmp_path, caplog):
    path = tmp_path / "cache.jsonl"
    cache = CaptionCache(path)
    cache.put(CaptionRecord("a", "gt", "one", "mock"))
    with open(path, "a") as fh:
        fh.write("{not json\n")
    CaptionCache(path).put(CaptionRecord("b", "lq", "two", "mock"))
    fresh = CaptionCache(path)
    assert fresh.get("a", "gt").text == "one" and fresh.get("b", "lq").text == "two"
    assert "corrupt" in caplog.text


def test_record_validation():
    with pytest.raises(ValueError):
        CaptionRecord("a", "mid", "x", "mock")
    with pytest.raises(ValueError):
        CaptionRecord("a", "gt", "", "mock")
