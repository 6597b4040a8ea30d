"""External model executor: tensor exchange with a child process.

Wire protocol over the child's standard streams, bit-exact:

    request:  ASCII line ``INFER <n>\\n``, then per tensor an ASCII line
              ``<rank> <d1> ... <dk>\\n`` followed by the rank-major
              little-endian f32 payload
    response: one tensor in the same framing
    shutdown: ASCII line ``QUIT\\n``

Any crash, early EOF, or malformed frame raises :class:`ExecutorError`.
"""

from __future__ import annotations

import subprocess

import numpy as np

from .errors import ExecutorError


class ExternalExecutor:
    """Handle to a running executor child process (not thread-safe)."""

    def __init__(self, command: list[str]):
        if not command:
            raise ExecutorError("empty executor command")
        self.command = list(command)
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise ExecutorError(f"failed to start executor {self.command!r}: {exc}") from exc

    def infer(self, tensors: list[np.ndarray]) -> np.ndarray:
        """Send input tensors, return the single output tensor."""
        proc = self._proc
        if proc.poll() is not None:
            raise ExecutorError(f"executor exited with code {proc.returncode}")
        try:
            proc.stdin.write(f"INFER {len(tensors)}\n".encode("ascii"))
            for tensor in tensors:
                arr = np.ascontiguousarray(tensor, dtype="<f4")
                dims = " ".join(str(d) for d in arr.shape)
                proc.stdin.write(f"{arr.ndim} {dims}\n".encode("ascii"))
                proc.stdin.write(arr.tobytes())
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise ExecutorError(f"executor pipe closed during request: {exc}") from exc
        return self._read_tensor()

    def _read_line(self) -> str:
        line = self._proc.stdout.readline()
        if not line:
            code = self._proc.poll()
            raise ExecutorError(f"executor closed its output (exit code {code})")
        return line.decode("ascii", errors="replace").strip()

    def _read_tensor(self) -> np.ndarray:
        header = self._read_line()
        fields = header.split()
        try:
            rank = int(fields[0])
            shape = tuple(int(v) for v in fields[1:])
        except (IndexError, ValueError):
            raise ExecutorError(f"malformed tensor header {header!r}") from None
        if rank != len(shape) or rank < 1 or any(d < 1 for d in shape):
            raise ExecutorError(f"inconsistent tensor header {header!r}")
        count = int(np.prod(shape))
        payload = self._proc.stdout.read(count * 4)
        if payload is None or len(payload) != count * 4:
            got = 0 if payload is None else len(payload)
            raise ExecutorError(
                f"short tensor payload: got {got} of {count * 4} bytes")
        return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.write(b"QUIT\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError):
                pass
            try:
                proc.wait(timeout=5.0)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        if proc.stdin:
            proc.stdin.close()
        if proc.stdout:
            proc.stdout.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
