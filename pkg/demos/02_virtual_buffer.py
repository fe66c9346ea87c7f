"""How the server confirms a stall it never saw, using only send and ack times.

Run: python demos/02_virtual_buffer.py
"""

from __future__ import annotations

from ugovor.virtual_buffer import DEFAULT_C, ChunkInfo, ChunkMap, VirtualBuffer, must_confirm_rebuffering, rebuffering_upper_bound

MB = 1_000_000


def main() -> None:
    cmap = ChunkMap([((i * MB, (i + 1) * MB), ChunkInfo("720p", 2.0, 2.0 * i)) for i in range(3)])
    vb = VirtualBuffer(cmap)
    print("Chunk 0 is sent at t=0 and acked at 0.3 s.  Chunk 1 is sent at 1.0 s.")
    a = vb.on_chunk_sent((0, MB), 0.0)
    vb.on_ack(0, 0.3)
    b = vb.on_chunk_sent((MB, 2 * MB), 1.0)

    for ack in (1.9, 3.0):
        b.t_ack = ack
        late = must_confirm_rebuffering(a, b)
        line = f"  ack of chunk 1 at {ack:.1f} s: "
        if late:
            bound = rebuffering_upper_bound(a, b, DEFAULT_C)
            line += f"chunk 0 ran out at the latest by 2.0 s, so a stall is plausible; duration bound {bound:.3f} s"
        else:
            line += "chunk 1 arrived before chunk 0 could have finished playing, so any reported stall is disputed"
        print(line)
    print(f"\nThe slack c = {DEFAULT_C * 1000:.0f} ms absorbs the player's own insertion delay.")


if __name__ == "__main__":
    main()
