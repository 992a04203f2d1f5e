"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class MtgcError(Exception):
    exit_code = 1


# guidance_text
class MissingFixtureCaption(MtgcError):
    exit_code = 10


class CaptionTooLong(MtgcError):
    exit_code = 11


class CorruptCaptionPayload(MtgcError):
    exit_code = 12


# hci_codec
class NonFiniteLoss(MtgcError):
    exit_code = 20


class ShapeNotDivisible(MtgcError):
    exit_code = 21


class UntrainedCodec(MtgcError):
    exit_code = 22


class CorruptHciBitstream(MtgcError):
    exit_code = 23


# tascm
class BackboneNotLoaded(MtgcError):
    exit_code = 30


class DimensionMismatch(MtgcError):
    exit_code = 31


class CorruptSpwPayload(MtgcError):
    exit_code = 32


# fusion
class CaptionOverflow(MtgcError):
    exit_code = 40


class SpwCountMismatch(MtgcError):
    exit_code = 41


class TextEncoderNotLoaded(MtgcError):
    exit_code = 42


# mgdd
class TimestepOutOfRange(MtgcError):
    exit_code = 50


class ShapeMismatch(MtgcError):
    exit_code = 51


class InvalidSteps(MtgcError):
    exit_code = 52


# training
class MissingPrerequisiteCheckpoint(MtgcError):
    exit_code = 60


# container
class ContainerError(MtgcError):
    exit_code = 70


class SectionTooLarge(ContainerError):
    exit_code = 71


class BadMagic(ContainerError):
    exit_code = 72


class VersionUnsupported(ContainerError):
    exit_code = 73


class CrcMismatch(ContainerError):
    exit_code = 74


class TruncatedContainer(ContainerError):
    exit_code = 75


# eval
class NotEnoughPoints(MtgcError):
    exit_code = 80


# cli
class ConfigError(MtgcError):
    exit_code = 2
