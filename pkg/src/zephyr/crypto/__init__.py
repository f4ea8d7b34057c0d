from .hybrid import X25519KeyPair, generate_keypair, open_sealed, seal
from .ibe import (
    H2_BYTES,
    IbeCiphertext,
    IdentityPrivateKey,
    MasterKeyPair,
    MasterPublicKey,
    canonical_identity,
    ibe_decrypt,
    ibe_encrypt,
    ibe_extract,
    ibe_setup,
    verify_identity_key,
)
from .pairing import STANDARD, TOY, PairingContext, get_context
from .sym import KEY_BYTES, NONCE_BYTES, TAG_BYTES, sym_decrypt, sym_encrypt

__all__ = [
    "H2_BYTES",
    "IbeCiphertext",
    "IdentityPrivateKey",
    "KEY_BYTES",
    "MasterKeyPair",
    "MasterPublicKey",
    "NONCE_BYTES",
    "PairingContext",
    "STANDARD",
    "TAG_BYTES",
    "TOY",
    "X25519KeyPair",
    "canonical_identity",
    "generate_keypair",
    "get_context",
    "ibe_decrypt",
    "ibe_encrypt",
    "ibe_extract",
    "ibe_setup",
    "open_sealed",
    "seal",
    "sym_decrypt",
    "sym_encrypt",
    "verify_identity_key",
]
