"""Scoring backends: in-process mock, line-protocol client, and mock servers.

A backend answers scoring requests for one model. The line protocol speaks
newline-delimited JSON: the server's first line is its descriptor, after which
responses may arrive in any order and are matched to requests by request_id.
"""

from __future__ import annotations

import io
import itertools
import json
import socket
import socketserver
import subprocess
import threading
from abc import ABC, abstractmethod
from concurrent.futures import Future, TimeoutError as FutureTimeout
from typing import IO, Callable

from gateau import copylm
from gateau.copylm import CopyLMParams
from gateau.corpus import TokenizerInfo, WhitespaceTokenizerInfo
from gateau.errors import BackendError, ProtocolError
from gateau.protocol import (
    ERR_BAD_REQUEST,
    ERR_INVALID_SEGMENT,
    ERR_UNSCOREABLE,
    BackendDescriptor,
    ScoringRequest,
    ScoringResponse,
    decode_message,
    encode_message,
    error_response,
    segment_bounds,
)


def answer_mock_request(params: CopyLMParams, req: ScoringRequest) -> ScoringResponse:
    """Answer one scoring request against the deterministic copy model.

    In-band failures (text outside the token space, empty response, bad
    segment index) come back as error responses, never exceptions.
    """
    try:
        if req.mode == "tokenize_info":
            return ScoringResponse(
                request_id=req.request_id,
                token_count_context=len(copylm.tokenize(req.context)),
                token_count_response=len(copylm.tokenize(req.response)),
            )
        context = copylm.tokenize(req.context)
        instruction = copylm.tokenize(req.instruction)
        response = copylm.tokenize(req.response)
        if not response:
            return error_response(req.request_id, ERR_UNSCOREABLE, "response has no tokens")
        if req.mode == "full_ppl":
            nll = copylm.response_mean_nll(params, context + instruction, response)
            return ScoringResponse(
                request_id=req.request_id,
                mean_response_nll=nll,
                token_count_context=len(context),
                token_count_response=len(response),
            )
        assert req.segment_length is not None  # enforced at request construction
        bounds = segment_bounds(len(context), req.segment_length)
        if req.mode == "segment_ppl":
            assert req.segment_index is not None
            if req.segment_index >= len(bounds):
                return error_response(
                    req.request_id,
                    ERR_INVALID_SEGMENT,
                    f"segment_index {req.segment_index} out of range for {len(bounds)} segments",
                )
            start, end = bounds[req.segment_index]
            nll = copylm.response_mean_nll(params, context[start:end] + instruction, response)
            return ScoringResponse(
                request_id=req.request_id,
                mean_response_nll=nll,
                token_count_context=end - start,
                token_count_response=len(response),
            )
        if req.mode == "attention_profile":
            if not context:
                return error_response(
                    req.request_id, ERR_UNSCOREABLE, "attention undefined for an empty context"
                )
            means = copylm.attention_segment_means(params, context, response, bounds)
            return ScoringResponse(
                request_id=req.request_id,
                per_segment_attention=tuple(means),
                token_count_context=len(context),
                token_count_response=len(response),
            )
        return error_response(req.request_id, ERR_BAD_REQUEST, f"unknown mode {req.mode!r}")
    except copylm.TokenizeError as exc:
        return error_response(req.request_id, ERR_UNSCOREABLE, str(exc))


class Backend(ABC):
    """One scoring endpoint. submit() must be safe to call from many threads."""

    @abstractmethod
    def descriptor(self) -> BackendDescriptor: ...

    @abstractmethod
    def submit(self, request: ScoringRequest) -> ScoringResponse: ...

    @property
    @abstractmethod
    def requests_issued(self) -> int:
        """Requests sent since construction; cache hits never reach this."""
        ...

    @property
    def name(self) -> str:
        return self.descriptor().name

    def close(self) -> None:  # streams/subprocesses override
        return None


class InProcessCopyBackend(Backend):
    """Mock backend evaluated in-process, without a wire round trip."""

    def __init__(self, params: CopyLMParams, name: str = "copy-lm") -> None:
        self._params = params
        self._descriptor = BackendDescriptor(
            name=name,
            context_window=params.context_window,
            supports_attention=True,
            tokenizer_fingerprint=copylm.tokenizer_fingerprint(params.vocab_size),
        )
        self._count = 0
        self._lock = threading.Lock()

    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    def submit(self, request: ScoringRequest) -> ScoringResponse:
        with self._lock:
            self._count += 1
        return answer_mock_request(self._params, request)

    @property
    def requests_issued(self) -> int:
        with self._lock:
            return self._count


class LineProtocolBackend(Backend):
    """Client for a backend reached over newline-delimited JSON streams."""

    def __init__(
        self,
        reader: IO[str],
        writer: IO[str],
        *,
        on_close: Callable[[], None] | None = None,
        shutdown_write: Callable[[], None] | None = None,
        timeout: float | None = 120.0,
    ) -> None:
        self._reader = reader
        self._writer = writer
        self._on_close = on_close
        # How to signal EOF to the server; closing a socket makefile alone
        # does not shut the connection down, so sockets need their own hook.
        self._shutdown_write = shutdown_write or writer.close
        self._timeout = timeout
        self._lock = threading.Lock()
        self._pending: dict[str, Future[ScoringResponse]] = {}
        self._count = 0
        self._closed = False

        first = reader.readline()
        if not first:
            raise BackendError("backend closed before sending its descriptor")
        msg = decode_message(first)
        if not isinstance(msg, BackendDescriptor):
            raise BackendError(
                f"expected a descriptor as the first message, got {type(msg).__name__}"
            )
        self._descriptor = msg
        self._thread = threading.Thread(
            target=self._read_loop, name=f"backend-reader-{msg.name}", daemon=True
        )
        self._thread.start()

    def descriptor(self) -> BackendDescriptor:
        return self._descriptor

    @property
    def requests_issued(self) -> int:
        with self._lock:
            return self._count

    def submit(self, request: ScoringRequest) -> ScoringResponse:
        fut: Future[ScoringResponse] = Future()
        line = encode_message(request)
        with self._lock:
            if self._closed:
                raise BackendError("backend is closed")
            if request.request_id in self._pending:
                raise BackendError(
                    f"request_id {request.request_id!r} is already in flight",
                    request_id=request.request_id,
                )
            self._pending[request.request_id] = fut
            self._count += 1
            try:
                self._writer.write(line + "\n")
                self._writer.flush()
            except (OSError, ValueError) as exc:
                self._pending.pop(request.request_id, None)
                raise BackendError(
                    f"backend write failed: {exc}", request_id=request.request_id
                ) from None
        try:
            return fut.result(timeout=self._timeout)
        except FutureTimeout:
            with self._lock:
                self._pending.pop(request.request_id, None)
            raise BackendError(
                f"no response within {self._timeout}s for {request.request_id!r}",
                request_id=request.request_id,
            ) from None

    def _read_loop(self) -> None:
        try:
            for line in self._reader:
                if not line.strip():
                    continue
                try:
                    msg = decode_message(line)
                except ProtocolError as exc:
                    self._fail_pending(BackendError(f"undecodable backend message: {exc}"))
                    return
                if not isinstance(msg, ScoringResponse):
                    continue
                with self._lock:
                    fut = self._pending.pop(msg.request_id, None)
                if fut is not None:
                    fut.set_result(msg)
        except (OSError, ValueError) as exc:
            self._fail_pending(BackendError(f"backend stream failed: {exc}"))
            return
        self._fail_pending(BackendError("backend closed the connection"))

    def _fail_pending(self, exc: BackendError) -> None:
        with self._lock:
            pending = list(self._pending.values())
            self._pending.clear()
        for fut in pending:
            if not fut.done():
                fut.set_exception(exc)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
        try:
            self._shutdown_write()
        except (OSError, ValueError):
            pass
        self._thread.join(timeout=5)
        if not self._thread.is_alive():
            # Safe only once the reader thread is done with the stream.
            try:
                self._reader.close()
            except (OSError, ValueError):
                pass
        if self._on_close is not None:
            self._on_close()
        self._fail_pending(BackendError("backend is closed"))

    @classmethod
    def spawn(cls, argv: list[str], *, timeout: float | None = 120.0) -> "LineProtocolBackend":
        """Launch a backend subprocess and attach to its stdio."""
        proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        assert proc.stdin is not None and proc.stdout is not None

        def on_close() -> None:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

        return cls(proc.stdout, proc.stdin, on_close=on_close, timeout=timeout)

    @classmethod
    def connect(cls, host: str, port: int, *, timeout: float | None = 120.0) -> "LineProtocolBackend":
        """Connect to a backend serving the line protocol over TCP."""
        sock = socket.create_connection((host, port), timeout=30)
        sock.settimeout(None)
        rfile = sock.makefile("r", encoding="utf-8", newline="\n")
        wfile = sock.makefile("w", encoding="utf-8", newline="\n")

        def shutdown_write() -> None:
            wfile.flush()
            sock.shutdown(socket.SHUT_WR)

        def on_close() -> None:
            try:
                sock.close()
            except OSError:
                pass

        return cls(rfile, wfile, on_close=on_close, shutdown_write=shutdown_write, timeout=timeout)


def _salvage_request_id(line: str) -> str:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return ""
    rid = obj.get("request_id") if isinstance(obj, dict) else None
    return rid if isinstance(rid, str) else ""


def serve_stream(params: CopyLMParams, rfile: IO[str], wfile: IO[str], *, name: str = "copy-lm") -> int:
    """Serve the mock scoring protocol on a stream pair until EOF.

    Malformed lines get a bad_request error response; the connection stays up.
    Returns the number of messages answered.
    """
    descriptor = BackendDescriptor(
        name=name,
        context_window=params.context_window,
        supports_attention=True,
        tokenizer_fingerprint=copylm.tokenizer_fingerprint(params.vocab_size),
    )
    wfile.write(encode_message(descriptor) + "\n")
    wfile.flush()
    answered = 0
    for line in rfile:
        if not line.strip():
            continue
        try:
            msg = decode_message(line)
            if not isinstance(msg, ScoringRequest):
                raise ProtocolError(f"expected a request, got {type(msg).__name__}")
            resp = answer_mock_request(params, msg)
        except ProtocolError as exc:
            resp = error_response(_salvage_request_id(line), ERR_BAD_REQUEST, str(exc))
        wfile.write(encode_message(resp) + "\n")
        wfile.flush()
        answered += 1
    return answered


def make_tcp_server(
    params: CopyLMParams,
    host: str = "127.0.0.1",
    port: int = 0,
    *,
    name: str = "copy-lm",
) -> socketserver.ThreadingTCPServer:
    """Build a threaded TCP server for the mock protocol; port 0 picks a free one.

    Callers own the lifecycle: serve_forever() to block, shutdown() to stop.
    """

    class Handler(socketserver.StreamRequestHandler):
        def handle(self) -> None:
            rfile = io.TextIOWrapper(self.rfile, encoding="utf-8")
            wfile = io.TextIOWrapper(self.wfile, encoding="utf-8", write_through=True)
            try:
                serve_stream(params, rfile, wfile, name=name)
            except (OSError, ValueError):
                pass  # client went away mid-stream

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    return Server((host, port), Handler)


class ProbeTokenizerInfo:
    """Token math answered by the backend itself through tokenize_info requests."""

    _ids = itertools.count()

    def __init__(self, backend: Backend) -> None:
        self._backend = backend

    def count_tokens(self, text: str) -> int:
        if not text:
            return 0
        rid = f"probe:{next(self._ids)}"
        resp = self._backend.submit(ScoringRequest(request_id=rid, mode="tokenize_info", context=text))
        if resp.error is not None:
            raise BackendError(
                f"tokenize probe failed: {resp.error.message}",
                code=resp.error.code,
                request_id=rid,
            )
        if resp.token_count_context is None:
            raise BackendError("tokenize probe returned no context count", request_id=rid)
        return resp.token_count_context

    def keep_trailing_tokens(self, text: str, n: int) -> str:
        if n <= 0:
            return ""
        total = self.count_tokens(text)
        if total <= n:
            return text
        # Binary-search the longest character suffix within the token budget;
        # assumes token count of text[i:] is non-increasing in i.
        lo, hi = 0, len(text)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.count_tokens(text[mid:]) <= n:
                hi = mid
            else:
                lo = mid + 1
        return text[lo:]


def tokenizer_info_for(backend: Backend) -> TokenizerInfo:
    """Exact token math when the fingerprint names a local rule, probing otherwise."""
    fp = backend.descriptor().tokenizer_fingerprint
    if fp.startswith("ws-int:"):
        return WhitespaceTokenizerInfo()
    return ProbeTokenizerInfo(backend)
