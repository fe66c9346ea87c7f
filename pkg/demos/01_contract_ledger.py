"""A streaming contract, one window of playback, and the levels it walks through.

Run: python demos/01_contract_ledger.py
"""

from __future__ import annotations

from ugovor.contract import SessionLedger, parse_contract, record_playback, record_rebuffering, settle

CONTRACT = """
{ "window": 120,
  "resolution": [[["720p", 0.5], ["1080p", 1], ["4K", 1]],
                 [["720p", 0.7], ["1080p", 1], ["4K", 1]],
                 [["720p", 0.9], ["1080p", 1], ["4K", 1]]],
  "rebuffering": [1, 5, 10] }
"""


def main() -> None:
    contract = parse_contract(CONTRACT)
    print(f"window {contract.window_s:g} s with {contract.n_levels} levels")
    ledger, _ = settle(contract, SessionLedger())

    print("\nThe player spends 10 s at 1080p, then stays at 720p for the rest of the window.")
    ledger = record_playback(ledger, "1080p", 10.0, window_s=contract.window_s)
    for chunk in range(55):
        if chunk == 45:
            cap = contract.rebuffering_caps[ledger.level_index]
            print(f"  two stalls hit; level {ledger.level_index} tolerates {cap}")
            for _ in range(2):
                ledger, _ = settle(contract, record_rebuffering(ledger))
        ledger = record_playback(ledger, "720p", 2.0, window_s=contract.window_s)
        ledger, violated = settle(contract, ledger)
        for level in violated:
            where = "Exhausted" if ledger.exhausted else f"level {ledger.level_index}"
            print(f"  after {ledger.played_s['720p']:.0f} s of 720p: level {level} violated, now {where}")
    print("\nAn exhausted window is priced as such.  Nobody is cut off for it.")

if __name__ == "__main__":
    main()
