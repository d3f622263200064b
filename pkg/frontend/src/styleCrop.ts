// Style-image crop tool: a square viewport panned/zoomed over the source
// image. The client only previews; the server performs the authoritative
// resample to 256x256, so this module's job is producing a valid crop rect.

export interface CropRect {
  left: number;
  top: number;
  width: number;
  height: number;
}

export class CropTool {
  // the crop is always square (the service wants 256x256)
  rect: CropRect;

  constructor(
    public imageWidth: number,
    public imageHeight: number,
  ) {
    const side = Math.min(imageWidth, imageHeight);
    this.rect = {
      left: Math.floor((imageWidth - side) / 2),
      top: Math.floor((imageHeight - side) / 2),
      width: side,
      height: side,
    };
  }

  clamp(rect: CropRect): CropRect {
    const side = Math.max(
      8,
      Math.min(rect.width, this.imageWidth, this.imageHeight),
    );
    const left = Math.min(Math.max(0, rect.left), this.imageWidth - side);
    const top = Math.min(Math.max(0, rect.top), this.imageHeight - side);
    return { left, top, width: side, height: side };
  }

  translate(dx: number, dy: number): CropRect {
    this.rect = this.clamp({
      ...this.rect,
      left: this.rect.left + dx,
      top: this.rect.top + dy,
    });
    return this.rect;
  }

  scale(factor: number): CropRect {
    const side = Math.round(this.rect.width * factor);
    const cx = this.rect.left + this.rect.width / 2;
    const cy = this.rect.top + this.rect.height / 2;
    this.rect = this.clamp({
      left: Math.round(cx - side / 2),
      top: Math.round(cy - side / 2),
      width: side,
      height: side,
    });
    return this.rect;
  }

  get isIdentity(): boolean {
    return (
      this.rect.left === 0 &&
      this.rect.top === 0 &&
      this.rect.width === this.imageWidth &&
      this.rect.height === this.imageHeight
    );
  }
}
