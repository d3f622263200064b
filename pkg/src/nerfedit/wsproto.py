"""Minimal RFC 6455 WebSocket framing over a socket.

Enough for one server and the test client: handshake, unfragmented
text/binary frames, ping/pong and close. No extensions, no compression.
"""

from __future__ import annotations

import base64
import hashlib
import os
import socket
import struct

GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

OP_TEXT = 0x1
OP_BINARY = 0x2
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA


def accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def encode_frame(opcode: int, payload: bytes, mask: bool = False) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    mask_bit = 0x80 if mask else 0
    if n < 126:
        head += bytes([mask_bit | n])
    elif n < 1 << 16:
        head += bytes([mask_bit | 126]) + struct.pack(">H", n)
    else:
        head += bytes([mask_bit | 127]) + struct.pack(">Q", n)
    if mask:
        key = os.urandom(4)
        masked = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        return head + key + masked
    return head + payload


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("websocket peer closed")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    """Read one (possibly fragmented) message; returns (opcode, payload)."""
    opcode = None
    payload = b""
    while True:
        b0, b1 = _read_exact(sock, 2)
        fin = b0 & 0x80
        op = b0 & 0x0F
        masked = b1 & 0x80
        n = b1 & 0x7F
        if n == 126:
            (n,) = struct.unpack(">H", _read_exact(sock, 2))
        elif n == 127:
            (n,) = struct.unpack(">Q", _read_exact(sock, 8))
        key = _read_exact(sock, 4) if masked else None
        data = _read_exact(sock, n) if n else b""
        if key:
            data = bytes(c ^ key[i % 4] for i, c in enumerate(data))
        if op != 0:
            opcode = op
        payload += data
        if fin:
            return opcode, payload


class WsClient:
    """Tiny client for tests and scripts."""

    def __init__(self, host: str, port: int, path: str, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        key = base64.b64encode(os.urandom(16)).decode()
        request = (
            f"GET {path} HTTP/1.1\r\nHost: {host}:{port}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )
        self.sock.sendall(request.encode())
        response = b""
        while b"\r\n\r\n" not in response:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("handshake failed")
            response += chunk
        status = response.split(b"\r\n", 1)[0]
        if b"101" not in status:
            raise ConnectionError(f"handshake rejected: {status!r}")
        expected = accept_key(key)
        if expected.encode() not in response:
            raise ConnectionError("bad Sec-WebSocket-Accept")

    def send_text(self, text: str) -> None:
        self.sock.sendall(encode_frame(OP_TEXT, text.encode(), mask=True))

    def recv(self) -> tuple[int, bytes]:
        while True:
            op, payload = read_frame(self.sock)
            if op == OP_PING:
                self.sock.sendall(encode_frame(OP_PONG, payload, mask=True))
                continue
            return op, payload

    def close(self) -> None:
        try:
            self.sock.sendall(encode_frame(OP_CLOSE, b"", mask=True))
        except OSError:
            pass
        self.sock.close()
