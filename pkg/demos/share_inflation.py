# %% [markdown]
# # The share-inflation state, by enumeration
#
# Share accounting mints `a` shares into an empty pool and `floor(a * S / A)`
# afterwards. A donation raises `A` without minting. Enumerating every
# two-step attacker sequence over amounts 1 and 10^6, followed by a victim
# deposit of 10^6, shows which ones leave the victim with nothing.

# %%
import itertools

from auditkg.fuzz import ProportionalShareFixture

VICTIM = 10**6
steps = list(itertools.product(("deposit", "donate"), (1, VICTIM)))

for seq in itertools.product(steps, repeat=2):
    pool = ProportionalShareFixture()
    for action, amount in seq:
        if action == "deposit":
            pool.deposit("attacker", amount)
        else:
            pool.donate(amount)
    minted = pool.deposit("victim", VICTIM)
    if minted == 0:
        print(seq, "S =", pool.total_shares, "A =", pool.total_assets,
              "attacker redeems", pool.redeemable("attacker"))

# %% [markdown]
# Both witnesses end at S = 1 and A = 2,000,001. The attacker's single share
# redeems the whole pool, victim deposit included. Scaling the donation shows
# the threshold: the victim is zeroed once the donation reaches the deposit
# size.

# %%
for donation in (10, 1_000, 999_999, 1_000_000, 5_000_000):
    pool = ProportionalShareFixture()
    pool.deposit("attacker", 1)
    pool.donate(donation)
    print(donation, pool.deposit("victim", VICTIM))
