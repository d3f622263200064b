// Minimal RFC6455 WebSocket client over node:net, for headless tests and
// scripted sessions (Node 20 ships no browser-compatible WebSocket).

import { connect, type Socket } from "node:net";
import { createHash, randomBytes } from "node:crypto";

import type { StreamSocket } from "./preview.js";

const GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";

function encodeFrame(opcode: number, payload: Uint8Array): Buffer {
  const mask = randomBytes(4);
  const n = payload.length;
  let header: Buffer;
  if (n < 126) header = Buffer.from([0x80 | opcode, 0x80 | n]);
  else if (n < 1 << 16) {
    header = Buffer.alloc(4);
    header[0] = 0x80 | opcode;
    header[1] = 0x80 | 126;
    header.writeUInt16BE(n, 2);
  } else {
    header = Buffer.alloc(10);
    header[0] = 0x80 | opcode;
    header[1] = 0x80 | 127;
    header.writeBigUInt64BE(BigInt(n), 2);
  }
  const masked = Buffer.alloc(n);
  for (let i = 0; i < n; i++) masked[i] = payload[i] ^ mask[i % 4];
  return Buffer.concat([header, mask, masked]);
}

class FrameParser {
  private buf = Buffer.alloc(0);

  feed(chunk: Buffer): Array<{ opcode: number; payload: Buffer }> {
    this.buf = Buffer.concat([this.buf, chunk]);
    const out: Array<{ opcode: number; payload: Buffer }> = [];
    for (;;) {
      if (this.buf.length < 2) return out;
      const opcode = this.buf[0] & 0x0f;
      let len = this.buf[1] & 0x7f;
      let offset = 2;
      if (len === 126) {
        if (this.buf.length < 4) return out;
        len = this.buf.readUInt16BE(2);
        offset = 4;
      } else if (len === 127) {
        if (this.buf.length < 10) return out;
        len = Number(this.buf.readBigUInt64BE(2));
        offset = 10;
      }
      if (this.buf.length < offset + len) return out;
      out.push({ opcode, payload: this.buf.subarray(offset, offset + len) });
      this.buf = this.buf.subarray(offset + len);
    }
  }
}

export function nodeSocket(url: string): Promise<StreamSocket> {
  const u = new URL(url);
  return new Promise((resolve, reject) => {
    const sock: Socket = connect(Number(u.port), u.hostname);
    const key = randomBytes(16).toString("base64");
    const accept = createHash("sha1").update(key + GUID).digest("base64");
    let handshook = false;
    let headerBuf = Buffer.alloc(0);
    const parser = new FrameParser();
    const textHandlers: Array<(t: string) => void> = [];
    const binHandlers: Array<(d: Uint8Array) => void> = [];
    const closeHandlers: Array<() => void> = [];

    sock.on("connect", () => {
      sock.write(
        `GET ${u.pathname} HTTP/1.1\r\nHost: ${u.host}\r\n` +
          "Upgrade: websocket\r\nConnection: Upgrade\r\n" +
          `Sec-WebSocket-Key: ${key}\r\nSec-WebSocket-Version: 13\r\n\r\n`,
      );
    });
    sock.on("error", reject);
    sock.on("close", () => closeHandlers.forEach((h) => h()));
    sock.on("data", (chunk: Buffer) => {
      if (!handshook) {
        headerBuf = Buffer.concat([headerBuf, chunk]);
        const end = headerBuf.indexOf("\r\n\r\n");
        if (end < 0) return;
        const head = headerBuf.subarray(0, end).toString();
        if (!head.includes("101") || !head.includes(accept)) {
          reject(new Error(`handshake rejected:\n${head}`));
          sock.destroy();
          return;
        }
        handshook = true;
        const rest = headerBuf.subarray(end + 4);
        chunk = Buffer.from(rest);
        resolve({
          send: (t) => sock.write(encodeFrame(0x1, Buffer.from(t))),
          close: () => {
            sock.write(encodeFrame(0x8, Buffer.alloc(0)));
            sock.end();
          },
          onText: (h) => textHandlers.push(h),
          onBinary: (h) => binHandlers.push(h),
          onClose: (h) => closeHandlers.push(h),
        });
        if (chunk.length === 0) return;
      }
      for (const frame of parser.feed(chunk)) {
        if (frame.opcode === 0x1) textHandlers.forEach((h) => h(frame.payload.toString()));
        else if (frame.opcode === 0x2) binHandlers.forEach((h) => h(new Uint8Array(frame.payload)));
        else if (frame.opcode === 0x9) sock.write(encodeFrame(0xa, frame.payload));
        else if (frame.opcode === 0x8) sock.end();
      }
    });
  });
}
