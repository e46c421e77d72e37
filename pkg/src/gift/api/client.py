"""Face-comparison clients returning a normalized 0-100 confidence.

Every provider sits behind the same ``compare`` call; adapters translate the
two PNG payloads into the vendor's request and pull the score back out.
"""

from __future__ import annotations

import base64
import datetime as _dt
import hashlib
import hmac
import io
import json
import logging
import os
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence
from urllib.parse import quote

import httpx
from PIL import Image

from ..errors import GiftError
from ..types import to_uint8

log = logging.getLogger(__name__)


class CredentialError(GiftError):
    pass


class ProviderContractError(GiftError):
    pass


class TransportError(GiftError):
    pass


class BatchError(GiftError):
    pass


class _Retryable(Exception):
    pass


def encode_png(image) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


@dataclass(frozen=True)
class ProviderConfig:
    provider: str = "mock"
    base_url: str = "http://127.0.0.1:8765"
    timeout: float = 30.0
    max_attempts: int = 3
    backoff_base: float = 1.0
    max_in_flight: int = 4
    region: str = ""

    def credentials(self) -> dict[str, str]:
        names = _CREDENTIAL_ENV.get(self.provider, ())
        creds = {n: os.environ.get(n, "") for n in names}
        missing = [n for n, v in creds.items() if not v]
        if missing:
            raise CredentialError(f"{self.provider}: missing environment variables {', '.join(missing)}")
        return creds


_CREDENTIAL_ENV = {
    "mock": (),
    "facepp": ("FACEPP_KEY", "FACEPP_SECRET"),
    "aliyun": ("ALIYUN_ACCESS_KEY_ID", "ALIYUN_ACCESS_KEY_SECRET"),
    "tencent": ("TENCENT_SECRET_ID", "TENCENT_SECRET_KEY"),
}


@dataclass
class CompareResult:
    provider: str
    confidence: float
    raw_payload: str
    latency_ms: float
    attempts: int = 1

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 100.0:
            raise ProviderContractError(f"{self.provider}: confidence {self.confidence} outside [0, 100]")


def _number(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ProviderContractError(f"{what}: expected a number, got {value!r}")
    return float(value)


class _Mock:
    def request(self, cfg, creds, a: bytes, b: bytes) -> httpx.Request:
        body = {"image_a": base64.b64encode(a).decode(), "image_b": base64.b64encode(b).decode()}
        return httpx.Request("POST", cfg.base_url.rstrip("/") + "/compare", json=body)

    def parse(self, payload: dict) -> float:
        if "confidence" not in payload:
            raise ProviderContractError("mock: response lacks 'confidence'")
        return _number(payload["confidence"], "mock confidence")


class _FacePP:
    """Face++ ``/facepp/v3/compare`` (form-encoded, key/secret in the body)."""

    def request(self, cfg, creds, a, b):
        data = {
            "api_key": creds["FACEPP_KEY"],
            "api_secret": creds["FACEPP_SECRET"],
            "image_base64_1": base64.b64encode(a).decode(),
            "image_base64_2": base64.b64encode(b).decode(),
        }
        return httpx.Request("POST", cfg.base_url.rstrip("/") + "/facepp/v3/compare", data=data)

    def parse(self, payload):
        if "error_message" in payload:
            msg = str(payload["error_message"])
            if "AUTHENTICATION" in msg or "AUTHORIZATION" in msg:
                raise CredentialError(f"facepp: {msg}")
            if "CONCURRENCY_LIMIT" in msg:
                raise _Retryable(msg)
            raise ProviderContractError(f"facepp: {msg}")
        if "confidence" not in payload:
            raise ProviderContractError("facepp: no face pair compared (missing 'confidence')")
        return _number(payload["confidence"], "facepp confidence")


class _Tencent:
    """Tencent Cloud IAI ``CompareFace`` with TC3-HMAC-SHA256 signing."""

    service = "iai"
    version = "2020-03-03"

    def request(self, cfg, creds, a, b, now: int | None = None):
        host = httpx.URL(cfg.base_url).host
        body = json.dumps({"ImageA": base64.b64encode(a).decode(),
                           "ImageB": base64.b64encode(b).decode()}, separators=(",", ":"))
        ts = int(now if now is not None else time.time())
        date = _dt.datetime.fromtimestamp(ts, _dt.timezone.utc).strftime("%Y-%m-%d")
        ctype = "application/json; charset=utf-8"
        canonical = "\n".join([
            "POST", "/", "",
            f"content-type:{ctype}\nhost:{host}\n",
            "content-type;host",
            hashlib.sha256(body.encode()).hexdigest(),
        ])
        scope = f"{date}/{self.service}/tc3_request"
        to_sign = "\n".join(["TC3-HMAC-SHA256", str(ts), scope, hashlib.sha256(canonical.encode()).hexdigest()])

        def _h(key: bytes, msg: str) -> bytes:
            return hmac.new(key, msg.encode(), hashlib.sha256).digest()

        k = _h(_h(_h(("TC3" + creds["TENCENT_SECRET_KEY"]).encode(), date), self.service), "tc3_request")
        signature = hmac.new(k, to_sign.encode(), hashlib.sha256).hexdigest()
        headers = {
            "Authorization": (f"TC3-HMAC-SHA256 Credential={creds['TENCENT_SECRET_ID']}/{scope}, "
                              f"SignedHeaders=content-type;host, Signature={signature}"),
            "Content-Type": ctype,
            "Host": host,
            "X-TC-Action": "CompareFace",
            "X-TC-Timestamp": str(ts),
            "X-TC-Version": self.version,
        }
        if cfg.region:
            headers["X-TC-Region"] = cfg.region
        return httpx.Request("POST", cfg.base_url, content=body.encode(), headers=headers)

    def parse(self, payload):
        resp = payload.get("Response")
        if not isinstance(resp, dict):
            raise ProviderContractError("tencent: response lacks 'Response'")
        err = resp.get("Error")
        if err:
            code = str(err.get("Code", ""))
            if code.startswith("AuthFailure"):
                raise CredentialError(f"tencent: {code}")
            if code.startswith("RequestLimitExceeded"):
                raise _Retryable(code)
            raise ProviderContractError(f"tencent: {code} {err.get('Message', '')}")
        return _number(resp.get("Score"), "tencent Score")


class _Aliyun:
    """Alibaba Cloud ``facebody`` CompareFace via the RPC-style HMAC-SHA1 signature."""

    version = "2019-12-30"

    def request(self, cfg, creds, a, b, now: float | None = None, nonce: str | None = None):
        ts = _dt.datetime.fromtimestamp(now if now is not None else time.time(), _dt.timezone.utc)
        params = {
            "Action": "CompareFace",
            "Format": "JSON",
            "Version": self.version,
            "AccessKeyId": creds["ALIYUN_ACCESS_KEY_ID"],
            "SignatureMethod": "HMAC-SHA1",
            "SignatureVersion": "1.0",
            "SignatureNonce": nonce or uuid.uuid4().hex,
            "Timestamp": ts.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "ImageDataA": base64.b64encode(a).decode(),
            "ImageDataB": base64.b64encode(b).decode(),
        }
        if cfg.region:
            params["RegionId"] = cfg.region

        def enc(s: str) -> str:
            return quote(s, safe="-_.~")

        query = "&".join(f"{enc(k)}={enc(v)}" for k, v in sorted(params.items()))
        to_sign = "POST&%2F&" + enc(query)
        key = (creds["ALIYUN_ACCESS_KEY_SECRET"] + "&").encode()
        params["Signature"] = base64.b64encode(hmac.new(key, to_sign.encode(), hashlib.sha1).digest()).decode()
        return httpx.Request("POST", cfg.base_url.rstrip("/") + "/", data=params)

    def parse(self, payload):
        if "Code" in payload and "Data" not in payload:
            code = str(payload["Code"])
            if code.startswith(("InvalidAccessKeyId", "SignatureDoesNotMatch", "Forbidden")):
                raise CredentialError(f"aliyun: {code}")
            if code.startswith("Throttling"):
                raise _Retryable(code)
            raise ProviderContractError(f"aliyun: {code} {payload.get('Message', '')}")
        data = payload.get("Data")
        if not isinstance(data, dict):
            raise ProviderContractError("aliyun: response lacks 'Data'")
        return _number(data.get("Confidence"), "aliyun Confidence")


ADAPTERS = {"mock": _Mock(), "facepp": _FacePP(), "tencent": _Tencent(), "aliyun": _Aliyun()}


def _adapter(cfg: ProviderConfig):
    try:
        return ADAPTERS[cfg.provider]
    except KeyError:
        raise ProviderContractError(f"unknown provider {cfg.provider!r}") from None


def compare_bytes(cfg: ProviderConfig, png_a: bytes, png_b: bytes, client: httpx.Client | None = None,
                  sleep: Callable[[float], None] = time.sleep) -> CompareResult:
    adapter = _adapter(cfg)
    creds = cfg.credentials()
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    try:
        last: Exception | None = None
        for attempt in range(1, cfg.max_attempts + 1):
            if attempt > 1:
                sleep(cfg.backoff_base * 2 ** (attempt - 2))
            request = adapter.request(cfg, creds, png_a, png_b)
            t0 = time.perf_counter()
            try:
                resp = client.send(request)
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s: transport error on attempt %d: %s", cfg.provider, attempt, exc)
                continue
            latency = 1000.0 * (time.perf_counter() - t0)
            if resp.status_code == 429:
                last = TransportError(f"{cfg.provider}: HTTP 429")
                log.warning("%s: rate limited on attempt %d", cfg.provider, attempt)
                continue
            if resp.status_code in (401, 403):
                raise CredentialError(f"{cfg.provider}: HTTP {resp.status_code}")
            text = resp.text
            try:
                payload = resp.json()
            except ValueError:
                raise ProviderContractError(f"{cfg.provider}: non-JSON response (HTTP {resp.status_code})") from None
            if not isinstance(payload, dict):
                raise ProviderContractError(f"{cfg.provider}: response is not an object")
            try:
                confidence = adapter.parse(payload)
            except _Retryable as exc:
                last = TransportError(f"{cfg.provider}: {exc}")
                continue
            if resp.status_code >= 400:
                raise ProviderContractError(f"{cfg.provider}: HTTP {resp.status_code}: {text[:200]}")
            return CompareResult(cfg.provider, confidence, text, latency, attempt)
        raise TransportError(f"{cfg.provider}: gave up after {cfg.max_attempts} attempts ({last})")
    finally:
        if own:
            client.close()


def compare(cfg: ProviderConfig, image_a, image_b, client: httpx.Client | None = None,
            sleep: Callable[[float], None] = time.sleep) -> CompareResult:
    return compare_bytes(cfg, encode_png(image_a), encode_png(image_b), client, sleep)


@dataclass
class BatchResult:
    mean: float
    results: list[CompareResult | None]
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def failure_count(self) -> int:
        return len(self.failures)


def batch_confidence(cfg: ProviderConfig, pairs: Sequence, client: httpx.Client | None = None,
                     sleep: Callable[[float], None] = time.sleep) -> BatchResult:
    """Mean confidence over pairs; failed pairs are excluded and listed."""
    if not pairs:
        raise BatchError("no image pairs given")

    def one(pair):
        a, b = pair
        if isinstance(a, bytes):
            return compare_bytes(cfg, a, b, client, sleep)
        return compare(cfg, a, b, client, sleep)

    results: list[CompareResult | None] = []
    failures: list[tuple[int, str]] = []
    with ThreadPoolExecutor(max_workers=max(1, cfg.max_in_flight)) as pool:
        futures = [pool.submit(one, p) for p in pairs]
        for i, fut in enumerate(futures):
            try:
                results.append(fut.result())
            except GiftError as exc:
                results.append(None)
                failures.append((i, str(exc)))
    ok = [r.confidence for r in results if r is not None]
    if not ok:
        raise BatchError(f"all {len(pairs)} comparisons failed")
    if failures:
        log.warning("%d of %d comparisons failed and were excluded", len(failures), len(pairs))
    return BatchResult(sum(ok) / len(ok), results, failures)
